#include "flipguard/theory.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "flipguard/rng.hpp"

namespace flipguard {

namespace {

double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double norm_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

// Gauss-Legendre nodes/weights on [-1,1] by Newton iteration.
struct GaussLegendre {
  std::vector<double> x, w;
  explicit GaussLegendre(int n) : x(n), w(n) {
    for (int i = 0; i < n; ++i) {
      double t = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
      for (int it = 0; it < 100; ++it) {
        double p0 = 1.0, p1 = t;
        for (int k = 2; k <= n; ++k) {
          const double p2 = ((2.0 * k - 1.0) * t * p1 - (k - 1.0) * p0) / k;
          p0 = p1;
          p1 = p2;
        }
        const double dp = n * (t * p1 - p0) / (t * t - 1.0);
        const double step = p1 / dp;
        t -= step;
        if (std::abs(step) < 1e-15) break;
      }
      double p0 = 1.0, p1 = t;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * t * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      const double dp = n * (t * p1 - p0) / (t * t - 1.0);
      x[i] = t;
      w[i] = 2.0 / ((1.0 - t * t) * dp * dp);
    }
  }
};

const GaussLegendre& quad128() {
  static const GaussLegendre g(128);
  return g;
}

// P(U <= a, V <= b) for standard bivariate normal with correlation rho.
double bvn_cdf(double a, double b, double rho) {
  if (a < -8.5 || b < -8.5) return 0.0;
  if (a > 8.5) return norm_cdf(b);
  if (b > 8.5) return norm_cdf(a);
  if (rho > 1.0 - 1e-12) return norm_cdf(std::min(a, b));
  if (rho < -1.0 + 1e-12)
    return std::max(0.0, norm_cdf(a) + norm_cdf(b) - 1.0);
  const double s = std::sqrt(1.0 - rho * rho);
  const double lo = -8.5, hi = a;
  const GaussLegendre& g = quad128();
  double acc = 0.0;
  for (std::size_t i = 0; i < g.x.size(); ++i) {
    const double t = 0.5 * (hi - lo) * g.x[i] + 0.5 * (hi + lo);
    acc += g.w[i] * norm_pdf(t) * norm_cdf((b - rho * t) / s);
  }
  return 0.5 * (hi - lo) * acc;
}

}  // namespace

LabeledSet sample_mixture(const GaussianMixture& mix, std::size_t n,
                          std::uint64_t seed) {
  Xoshiro256 rng(mix_seed({seed, 0x7E02ULL}));
  LabeledSet s;
  s.x = Tensor({n, 2});
  s.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = rng.uniform01() < 0.5 ? 0 : 1;
    const double mx = label == 0 ? mix.mu0x : mix.mu1x;
    const double my = label == 0 ? mix.mu0y : mix.mu1y;
    s.x.at(i, 0) = mx + mix.sigma * rng.normal();
    s.x.at(i, 1) = my + mix.sigma * rng.normal();
    s.y[i] = label;
  }
  return s;
}

LinearClassifier ClassifierGrid::at(std::size_t index) const {
  const std::size_t ai = index / n_offsets;
  const std::size_t oi = index % n_offsets;
  const double angle =
      2.0 * std::numbers::pi * static_cast<double>(ai) /
      static_cast<double>(n_angles);
  const double b =
      offset_lo + (offset_hi - offset_lo) * static_cast<double>(oi) /
                      static_cast<double>(n_offsets - 1);
  return LinearClassifier{std::cos(angle), std::sin(angle), b};
}

namespace {

// Class means tilted off the axes so the optimal separator's angle is a
// live degree of freedom (an axis-aligned optimum pins the angle at the
// l1-norm kink and the excess risk decays faster than the 1/sqrt(n)
// regime this experiment measures).
GaussianMixture tilted_mixture() {
  const double tilt = 0.35;
  GaussianMixture mix;
  mix.mu0x = -std::cos(tilt);
  mix.mu0y = -std::sin(tilt);
  mix.mu1x = std::cos(tilt);
  mix.mu1y = std::sin(tilt);
  mix.sigma = 1.0;
  return mix;
}

}  // namespace

ConsistencyProblem ConsistencyProblem::zero_one(bool constrained) {
  ConsistencyProblem p;
  p.dist = tilted_mixture();
  p.loss = TheoryLoss::ZeroOne;
  p.constrained = constrained;
  // Old model: rotated separator, deliberately suboptimal.
  p.f_old = LinearClassifier{std::cos(0.5), std::sin(0.5), 0.3};
  // Below the unconstrained optimum's constraint value, so it binds.
  p.epsilon_hat = constrained ? 0.022 : 1e9;
  p.epsilon_hat_shrink = constrained ? 0.25 : 0.0;
  return p;
}

ConsistencyProblem ConsistencyProblem::robust_zero_one(bool constrained) {
  ConsistencyProblem p;
  p.dist = tilted_mixture();
  p.loss = TheoryLoss::RobustZeroOne;
  p.attack_epsilon = 0.15;
  p.constrained = constrained;
  p.f_old = LinearClassifier{std::cos(0.5), std::sin(0.5), 0.3};
  p.epsilon_hat = constrained ? 0.031 : 1e9;
  p.epsilon_hat_shrink = constrained ? 0.25 : 0.0;
  return p;
}

bool sample_loss(const ConsistencyProblem& p, const LinearClassifier& f,
                 double x, double y, int label) {
  const double delta =
      p.loss == TheoryLoss::RobustZeroOne ? p.attack_epsilon * f.l1_norm()
                                          : 0.0;
  const double m = f.margin(x, y);
  return label == 1 ? m <= delta : m > -delta;
}

// ---------------------------------------------------------------------
//  Empirical solvers: angle-major projections with sorted threshold
//  sweeps, so each grid point costs O(log n).
// ---------------------------------------------------------------------

namespace {

struct GridScores {
  std::vector<double> risk;        // per grid index
  std::vector<double> constraint;  // mean loss over the old-ok subset
};

GridScores score_grid(const LabeledSet& sample, const ConsistencyProblem& p) {
  const std::size_t n = sample.size();
  std::vector<unsigned char> old_ok(n);
  for (std::size_t i = 0; i < n; ++i)
    old_ok[i] = sample_loss(p, p.f_old, sample.x.at(i, 0), sample.x.at(i, 1),
                            sample.y[i])
                    ? 0
                    : 1;
  std::size_t n0 = 0;
  for (unsigned char v : old_ok) n0 += v;

  GridScores out;
  out.risk.resize(p.grid.size());
  out.constraint.resize(p.grid.size());

  std::vector<double> p1, p0, p1ok, p0ok;
  for (std::size_t ai = 0; ai < p.grid.n_angles; ++ai) {
    const LinearClassifier f0 = p.grid.at(ai * p.grid.n_offsets);
    const double delta = p.loss == TheoryLoss::RobustZeroOne
                             ? p.attack_epsilon * f0.l1_norm()
                             : 0.0;
    p1.clear();
    p0.clear();
    p1ok.clear();
    p0ok.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const double proj =
          f0.wx * sample.x.at(i, 0) + f0.wy * sample.x.at(i, 1);
      if (sample.y[i] == 1) {
        p1.push_back(proj);
        if (old_ok[i]) p1ok.push_back(proj);
      } else {
        p0.push_back(proj);
        if (old_ok[i]) p0ok.push_back(proj);
      }
    }
    std::sort(p1.begin(), p1.end());
    std::sort(p0.begin(), p0.end());
    std::sort(p1ok.begin(), p1ok.end());
    std::sort(p0ok.begin(), p0ok.end());

    const auto count_le = [](const std::vector<double>& v, double t) {
      return static_cast<std::size_t>(
          std::upper_bound(v.begin(), v.end(), t) - v.begin());
    };
    for (std::size_t oi = 0; oi < p.grid.n_offsets; ++oi) {
      const std::size_t gi = ai * p.grid.n_offsets + oi;
      const double b = p.grid.at(gi).b;
      // label 1 errs when proj <= b + delta, label 0 when proj > b - delta
      const std::size_t e1 = count_le(p1, b + delta);
      const std::size_t e0 = p0.size() - count_le(p0, b - delta);
      const std::size_t e1ok = count_le(p1ok, b + delta);
      const std::size_t e0ok = p0ok.size() - count_le(p0ok, b - delta);
      out.risk[gi] =
          static_cast<double>(e1 + e0) / static_cast<double>(n);
      out.constraint[gi] =
          n0 ? static_cast<double>(e1ok + e0ok) / static_cast<double>(n0)
             : 0.0;
    }
  }
  return out;
}

ErmSolution pick(const ConsistencyProblem& p, const GridScores& s,
                 std::size_t gi, bool feasible) {
  return ErmSolution{p.grid.at(gi), gi, s.risk[gi], s.constraint[gi],
                     feasible};
}

}  // namespace

ErmSolution solve_constrained_erm(const LabeledSet& sample,
                                  const ConsistencyProblem& p) {
  if (sample.size() == 0) throw ConfigError("erm: empty sample");
  const GridScores s = score_grid(sample, p);
  const double eh = p.constrained ? p.epsilon_hat : 1e18;
  bool any = false;
  std::size_t best = 0;
  for (std::size_t gi = 0; gi < p.grid.size(); ++gi) {
    if (s.constraint[gi] > eh) continue;
    if (!any || s.risk[gi] < s.risk[best] ||
        (s.risk[gi] == s.risk[best] && s.constraint[gi] < s.constraint[best])) {
      any = true;
      best = gi;
    }
  }
  if (any) return pick(p, s, best, true);
  // Nothing feasible: minimize the violation instead.
  best = 0;
  for (std::size_t gi = 1; gi < p.grid.size(); ++gi)
    if (s.constraint[gi] < s.constraint[best] ||
        (s.constraint[gi] == s.constraint[best] &&
         s.risk[gi] < s.risk[best]))
      best = gi;
  return pick(p, s, best, false);
}

ErmSolution solve_penalized_erm(const LabeledSet& sample,
                                const ConsistencyProblem& p, double mu) {
  if (sample.size() == 0) throw ConfigError("erm: empty sample");
  if (mu < 0) throw ConfigError("erm: mu must be >= 0");
  const GridScores s = score_grid(sample, p);
  std::size_t best = 0;
  double best_obj = s.risk[0] + mu * s.constraint[0];
  for (std::size_t gi = 1; gi < p.grid.size(); ++gi) {
    const double obj = s.risk[gi] + mu * s.constraint[gi];
    if (obj < best_obj ||
        (obj == best_obj && s.constraint[gi] < s.constraint[best])) {
      best = gi;
      best_obj = obj;
    }
  }
  return pick(p, s, best, true);
}

// ---------------------------------------------------------------------
//  Population quantities
// ---------------------------------------------------------------------

namespace {

struct ClassGeometry {
  double mf, sf;  // f-margin mean and std under this class
  double mo, so;  // old-margin mean and std
  double rho;
};

ClassGeometry class_geometry(const GaussianMixture& mix,
                             const LinearClassifier& f,
                             const LinearClassifier& old_f, int label) {
  const double mx = label == 0 ? mix.mu0x : mix.mu1x;
  const double my = label == 0 ? mix.mu0y : mix.mu1y;
  ClassGeometry g;
  g.mf = f.wx * mx + f.wy * my - f.b;
  g.mo = old_f.wx * mx + old_f.wy * my - old_f.b;
  g.sf = mix.sigma * f.l2_norm();
  g.so = mix.sigma * old_f.l2_norm();
  g.rho = (f.wx * old_f.wx + f.wy * old_f.wy) / (f.l2_norm() * old_f.l2_norm());
  return g;
}

}  // namespace

double population_risk(const ConsistencyProblem& p,
                       const LinearClassifier& f) {
  const double delta = p.loss == TheoryLoss::RobustZeroOne
                           ? p.attack_epsilon * f.l1_norm()
                           : 0.0;
  double risk = 0.0;
  for (int label = 0; label < 2; ++label) {
    const ClassGeometry g = class_geometry(p.dist, f, p.f_old, label);
    const double err =
        label == 1 ? norm_cdf((delta - g.mf) / g.sf)
                   : 1.0 - norm_cdf((-delta - g.mf) / g.sf);
    risk += 0.5 * err;
  }
  return risk;
}

double population_constraint(const ConsistencyProblem& p,
                             const LinearClassifier& f) {
  const double df = p.loss == TheoryLoss::RobustZeroOne
                        ? p.attack_epsilon * f.l1_norm()
                        : 0.0;
  const double dold = p.loss == TheoryLoss::RobustZeroOne
                          ? p.attack_epsilon * p.f_old.l1_norm()
                          : 0.0;
  double num = 0.0, den = 0.0;
  for (int label = 0; label < 2; ++label) {
    const ClassGeometry g = class_geometry(p.dist, f, p.f_old, label);
    if (label == 1) {
      const double u = (df - g.mf) / g.sf;    // f errs: U <= u
      const double v = (dold - g.mo) / g.so;  // old ok: V > v
      num += 0.5 * (norm_cdf(u) - bvn_cdf(u, v, g.rho));
      den += 0.5 * (1.0 - norm_cdf(v));
    } else {
      const double u = (-df - g.mf) / g.sf;    // f errs: U > u
      const double v = (-dold - g.mo) / g.so;  // old ok: V <= v
      num += 0.5 * (norm_cdf(v) - bvn_cdf(u, v, g.rho));
      den += 0.5 * norm_cdf(v);
    }
  }
  return den > 0 ? num / den : 0.0;
}

PopulationOptimum population_optimum(const ConsistencyProblem& p) {
  bool any = false;
  PopulationOptimum best;
  for (std::size_t gi = 0; gi < p.grid.size(); ++gi) {
    const LinearClassifier f = p.grid.at(gi);
    const double risk = population_risk(p, f);
    double con = 0.0;
    if (p.constrained) {
      con = population_constraint(p, f);
      if (con > p.epsilon_hat) continue;
    }
    if (!any || risk < best.risk) {
      any = true;
      best = PopulationOptimum{f, gi, risk, con};
    }
  }
  if (!any)
    throw ConfigError("population optimum: constraint level admits no grid "
                      "point");
  if (!p.constrained) best.constraint = population_constraint(p, best.f);
  return best;
}

RateFit measure_rate(const ConsistencyProblem& p,
                     std::span<const std::size_t> n_list, int trials,
                     std::uint64_t seed) {
  if (n_list.empty()) throw ConfigError("measure_rate: empty n list");
  for (std::size_t i = 1; i < n_list.size(); ++i)
    if (n_list[i] <= n_list[i - 1])
      throw ConfigError("measure_rate: n list must be increasing");
  if (trials < 10) throw ConfigError("measure_rate: need >= 10 trials");

  const PopulationOptimum opt = population_optimum(p);
  std::map<std::size_t, std::pair<double, double>> pop_cache;  // gi -> (risk, con)
  const auto pop_of = [&](std::size_t gi) {
    const auto it = pop_cache.find(gi);
    if (it != pop_cache.end()) return it->second;
    const LinearClassifier f = p.grid.at(gi);
    const std::pair<double, double> v{population_risk(p, f),
                                      population_constraint(p, f)};
    return pop_cache.emplace(gi, v).first->second;
  };

  RateFit fit;
  for (const std::size_t n : n_list) {
    ConsistencyProblem pn = p;
    if (p.constrained && p.epsilon_hat_shrink > 0)
      pn.epsilon_hat = std::max(
          0.5 * p.epsilon_hat,
          p.epsilon_hat -
              p.epsilon_hat_shrink / std::sqrt(static_cast<double>(n)));
    std::vector<double> excess(static_cast<std::size_t>(trials));
    std::vector<double> empc(static_cast<std::size_t>(trials));
    std::vector<double> popc(static_cast<std::size_t>(trials));
    for (int t = 0; t < trials; ++t) {
      const LabeledSet sample = sample_mixture(
          p.dist, n,
          mix_seed({seed, static_cast<std::uint64_t>(n),
                    static_cast<std::uint64_t>(t)}));
      const ErmSolution sol = solve_constrained_erm(sample, pn);
      const auto pop = pop_of(sol.grid_index);
      excess[static_cast<std::size_t>(t)] = pop.first - opt.risk;
      empc[static_cast<std::size_t>(t)] = sol.emp_constraint;
      popc[static_cast<std::size_t>(t)] = pop.second;
    }
    const auto mean = [](const std::vector<double>& v) {
      double s = 0;
      for (double x : v) s += x;
      return s / static_cast<double>(v.size());
    };
    const auto stdev = [&](const std::vector<double>& v, double m) {
      double s = 0;
      for (double x : v) s += (x - m) * (x - m);
      return std::sqrt(s / static_cast<double>(v.size() - 1));
    };
    const double me = mean(excess), mc = mean(empc), mp = mean(popc);
    fit.n_list.push_back(n);
    fit.mean_excess.push_back(me);
    fit.std_excess.push_back(stdev(excess, me));
    fit.mean_emp_constraint.push_back(mc);
    fit.std_pop_constraint.push_back(stdev(popc, mp));
  }

  fit.saturated = true;
  for (double e : fit.mean_excess)
    if (e >= 1e-9) fit.saturated = false;

  // Least-squares slope of log(mean excess) against log n.
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double k = static_cast<double>(fit.n_list.size());
  for (std::size_t i = 0; i < fit.n_list.size(); ++i) {
    const double lx = std::log(static_cast<double>(fit.n_list[i]));
    const double ly = std::log(std::max(fit.mean_excess[i], 1e-12));
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  fit.slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
  fit.intercept = (sy - fit.slope * sx) / k;
  return fit;
}

}  // namespace flipguard
