#include "flipguard/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "flipguard/rng.hpp"

namespace flipguard {

Tensor LabeledSet::row(std::size_t i) const {
  const std::size_t d = dim();
  Tensor r({d});
  std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(i * d), d,
              r.data.begin());
  return r;
}

int LabeledSet::num_classes() const {
  int c = 0;
  for (int v : y) c = std::max(c, v + 1);
  return c;
}

std::vector<std::uint64_t> sample_hashes(const LabeledSet& s) {
  const std::size_t d = s.dim();
  std::vector<std::uint64_t> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    std::uint64_t h = fnv1a(s.x.data.data() + i * d, d * sizeof(double));
    h = fnv1a(&s.y[i], sizeof(int), h);
    out[i] = h;
  }
  return out;
}

std::uint64_t set_hash(const LabeledSet& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint64_t v : sample_hashes(s)) h = fnv1a(&v, sizeof v, h);
  return h;
}

void DatasetSplit::validate() const {
  const LabeledSet* parts[3] = {&train, &validation, &test};
  const char* names[3] = {"train", "validation", "test"};
  std::set<std::uint64_t> seen;
  for (int p = 0; p < 3; ++p) {
    const LabeledSet& s = *parts[p];
    if (s.size() == 0)
      throw ConfigError(std::string("dataset: empty ") + names[p] +
                        " partition");
    for (double v : s.x.data)
      if (!(v >= 0.0 && v <= 1.0))
        throw ConfigError(std::string("dataset: feature outside [0,1] in ") +
                          names[p]);
    std::set<int> classes(s.y.begin(), s.y.end());
    if (classes.size() < 2)
      throw ConfigError(std::string("dataset: fewer than 2 classes in ") +
                        names[p]);
    for (std::uint64_t h : sample_hashes(s))
      if (!seen.insert(h).second)
        throw ConfigError("dataset: identical sample appears in two "
                          "partitions (leakage)");
  }
}

SyntheticKind synthetic_kind_from_name(const std::string& s) {
  if (s == "gaussians") return SyntheticKind::Gaussians;
  if (s == "moons") return SyntheticKind::Moons;
  if (s == "rings") return SyntheticKind::Rings;
  throw ConfigError("unknown synthetic dataset kind '" + s + "'");
}

namespace {

// Min-max scale each feature column into [0,1].
void minmax_scale(Tensor& X) {
  const std::size_t n = X.shape[0], d = X.shape[1];
  for (std::size_t j = 0; j < d; ++j) {
    double lo = X.at(0, j), hi = X.at(0, j);
    for (std::size_t i = 1; i < n; ++i) {
      lo = std::min(lo, X.at(i, j));
      hi = std::max(hi, X.at(i, j));
    }
    const double span = hi - lo;
    for (std::size_t i = 0; i < n; ++i) {
      double v = span > 0 ? (X.at(i, j) - lo) / span : 0.5;
      X.at(i, j) = std::min(1.0, std::max(0.0, v));
    }
  }
}

DatasetSplit split_70_15_15(Tensor X, std::vector<int> y,
                            std::uint64_t seed, std::string provenance) {
  const std::size_t n = y.size(), d = X.shape[1];
  const auto perm = seeded_permutation(n, mix_seed({seed, 0x59117ULL}));
  const std::size_t n_tr = n * 70 / 100;
  const std::size_t n_va = n * 15 / 100;
  DatasetSplit out;
  out.provenance = std::move(provenance);
  const auto take = [&](std::size_t lo, std::size_t hi) {
    LabeledSet s;
    s.x = Tensor({hi - lo, d});
    s.y.resize(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) {
      const std::size_t src = perm[i];
      std::copy_n(X.data.begin() + static_cast<std::ptrdiff_t>(src * d), d,
                  s.x.data.begin() + static_cast<std::ptrdiff_t>((i - lo) * d));
      s.y[i - lo] = y[src];
    }
    return s;
  };
  out.train = take(0, n_tr);
  out.validation = take(n_tr, n_tr + n_va);
  out.test = take(n_tr + n_va, n);
  out.validate();
  return out;
}

}  // namespace

DatasetSplit make_synthetic(SyntheticKind kind, std::size_t n,
                            std::size_t dim, std::size_t classes,
                            double margin, double noise, std::uint64_t seed) {
  if (classes < 2) throw ConfigError("synthetic: need at least 2 classes");
  if (n < 10 * classes)
    throw ConfigError("synthetic: need n >= 10 * classes");
  if (dim < 2) throw ConfigError("synthetic: need dim >= 2");
  if (kind == SyntheticKind::Moons && classes != 2)
    throw ConfigError("synthetic: moons is a 2-class dataset");

  Xoshiro256 rng(mix_seed({seed, 0xDA7AULL}));
  Tensor X({n, dim});
  std::vector<int> y(n);
  const double pi = std::numbers::pi;

  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % classes);  // balanced by construction
    y[i] = c;
    double px = 0, py = 0;
    switch (kind) {
      case SyntheticKind::Gaussians: {
        // Means on a circle; min pairwise distance = margin * noise.
        const double r =
            margin * noise / (2.0 * std::sin(pi / static_cast<double>(classes)));
        const double a = 2.0 * pi * c / static_cast<double>(classes);
        px = r * std::cos(a) + noise * rng.normal();
        py = r * std::sin(a) + noise * rng.normal();
        break;
      }
      case SyntheticKind::Moons: {
        const double t = pi * rng.uniform01();
        if (c == 0) {
          px = std::cos(t);
          py = std::sin(t);
        } else {
          px = 1.0 - std::cos(t);
          py = 0.5 - std::sin(t);
        }
        px += noise * rng.normal();
        py += noise * rng.normal();
        break;
      }
      case SyntheticKind::Rings: {
        const double radius = margin * noise * static_cast<double>(c + 1);
        const double a = 2.0 * pi * rng.uniform01();
        const double rr = radius + noise * rng.normal();
        px = rr * std::cos(a);
        py = rr * std::sin(a);
        break;
      }
    }
    X.at(i, 0) = px;
    X.at(i, 1) = py;
    for (std::size_t j = 2; j < dim; ++j) X.at(i, j) = rng.normal() * noise;
  }

  minmax_scale(X);
  std::ostringstream prov;
  prov << "synthetic:"
       << (kind == SyntheticKind::Gaussians
               ? "gaussians"
               : kind == SyntheticKind::Moons ? "moons" : "rings")
       << ":n=" << n << ":d=" << dim << ":c=" << classes << ":seed=" << seed;
  return split_70_15_15(std::move(X), std::move(y), seed, prov.str());
}

DatasetSplit make_benchmark(std::size_t n, std::uint64_t seed) {
  // Classes 0/1: concentric rings; classes 2/3: blobs placed in
  // opposite corners. Scales chosen so class boundaries sit well inside
  // the unit box and attacks at eps ~ 0.03 can reach them.
  Xoshiro256 rng(mix_seed({seed, 0xBE7CULL}));
  Tensor X({n, 2});
  std::vector<int> y(n);
  const double pi = std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % 4);
    y[i] = c;
    double px = 0, py = 0;
    if (c < 2) {
      const double radius = c == 0 ? 1.0 : 1.8;
      const double a = 2.0 * pi * rng.uniform01();
      const double rr = radius + 0.22 * rng.normal();
      px = rr * std::cos(a);
      py = rr * std::sin(a);
    } else {
      const double cx = c == 2 ? 2.6 : -2.6;
      const double cy = c == 2 ? 2.6 : -2.6;
      px = cx + 0.45 * rng.normal();
      py = cy + 0.45 * rng.normal();
    }
    X.at(i, 0) = px;
    X.at(i, 1) = py;
  }
  minmax_scale(X);
  std::ostringstream prov;
  prov << "benchmark:rings+gaussians:n=" << n << ":seed=" << seed;
  return split_70_15_15(std::move(X), std::move(y), seed, prov.str());
}

// ---------------------------------------------------------------------
//  csv / idx
// ---------------------------------------------------------------------

void save_csv(const LabeledSet& s, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open csv for writing: " + path);
  const std::size_t d = s.dim();
  f << "label";
  for (std::size_t j = 0; j < d; ++j) f << ",f" << j;
  f << "\n";
  char buf[40];
  for (std::size_t i = 0; i < s.size(); ++i) {
    f << s.y[i];
    for (std::size_t j = 0; j < d; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", s.x.at(i, j));
      f << ',' << buf;
    }
    f << "\n";
  }
  if (!f) throw IoError("csv write failed: " + path);
}

LabeledSet load_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open csv: " + path);
  std::string line;
  if (!std::getline(f, line))
    throw ParseError("csv: missing header row", 0);
  std::vector<double> feats;
  std::vector<int> y;
  std::size_t d = 0, lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tok;
    std::vector<double> row;
    bool first = true;
    int label = 0;
    while (std::getline(ss, tok, ',')) {
      try {
        std::size_t pos = 0;
        if (first) {
          label = std::stoi(tok, &pos);
        } else {
          row.push_back(std::stod(tok, &pos));
        }
        if (pos != tok.size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ParseError("csv: bad value '" + tok + "' on line " +
                             std::to_string(lineno),
                         lineno);
      }
      first = false;
    }
    if (first)
      throw ParseError("csv: empty row on line " + std::to_string(lineno),
                       lineno);
    if (d == 0) d = row.size();
    if (row.size() != d || d == 0)
      throw ParseError("csv: row with " + std::to_string(row.size()) +
                           " features, expected " + std::to_string(d) +
                           " on line " + std::to_string(lineno),
                       lineno);
    for (double v : row)
      if (!(v >= 0.0 && v <= 1.0))
        throw ParseError("csv: feature outside [0,1] on line " +
                             std::to_string(lineno),
                         lineno);
    y.push_back(label);
    feats.insert(feats.end(), row.begin(), row.end());
  }
  if (y.empty()) throw ParseError("csv: no data rows", lineno);
  LabeledSet s;
  s.x = Tensor({y.size(), d}, std::move(feats));
  s.y = std::move(y);
  return s;
}

namespace {

std::uint32_t read_be32(std::istream& f, std::size_t& offset,
                        const char* what) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (f.gcount() != 4)
    throw ParseError(std::string("idx: truncated ") + what, offset);
  offset += 4;
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

std::string derive_label_path(const std::string& images) {
  std::string p = images;
  const auto sub = [&](const char* from, const char* to) {
    const auto pos = p.find(from);
    if (pos != std::string::npos) p.replace(pos, std::strlen(from), to);
  };
  sub("images", "labels");
  sub("idx3", "idx1");
  if (p == images) p += ".labels";
  return p;
}

}  // namespace

LabeledSet load_idx(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open idx file: " + path);
  std::size_t off = 0;
  if (read_be32(f, off, "magic") != 0x00000803u)
    throw ParseError("idx: bad image magic (want 0x00000803)", 0);
  const std::uint32_t n = read_be32(f, off, "count");
  const std::uint32_t rows = read_be32(f, off, "rows");
  const std::uint32_t cols = read_be32(f, off, "cols");
  const std::size_t d = std::size_t(rows) * cols;
  std::vector<unsigned char> px(std::size_t(n) * d);
  f.read(reinterpret_cast<char*>(px.data()),
         static_cast<std::streamsize>(px.size()));
  if (f.gcount() != static_cast<std::streamsize>(px.size()))
    throw ParseError("idx: truncated pixel payload", off);

  const std::string lpath = derive_label_path(path);
  std::ifstream lf(lpath, std::ios::binary);
  if (!lf) throw IoError("cannot open idx label file: " + lpath);
  std::size_t loff = 0;
  if (read_be32(lf, loff, "label magic") != 0x00000801u)
    throw ParseError("idx: bad label magic (want 0x00000801)", 0);
  if (read_be32(lf, loff, "label count") != n)
    throw IntegrityError("idx: label count does not match image count");
  std::vector<unsigned char> lab(n);
  lf.read(reinterpret_cast<char*>(lab.data()), n);
  if (lf.gcount() != static_cast<std::streamsize>(n))
    throw ParseError("idx: truncated labels", loff);

  LabeledSet s;
  s.x = Tensor({std::size_t(n), d});
  s.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.y[i] = lab[i];
    for (std::size_t j = 0; j < d; ++j)
      s.x.data[i * d + j] = px[i * d + j] / 255.0;
  }
  return s;
}

DatasetSplit load_dataset(const std::string& path, DataFormat format) {
  LabeledSet s =
      format == DataFormat::Csv ? load_csv(path) : load_idx(path);
  // Fixed split seed so a file always maps to the same partitions.
  const std::uint64_t kSplitSeed = 0x5eed5eedULL;
  std::uint64_t content =
      fnv1a(s.x.data.data(), s.x.data.size() * sizeof(double));
  std::ostringstream prov;
  prov << "file:" << path << ":hash=" << std::hex << content;
  return split_70_15_15(std::move(s.x), std::move(s.y), kSplitSeed,
                        prov.str());
}

}  // namespace flipguard
