#include "flipguard/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "flipguard/rng.hpp"
#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

namespace flipguard {

using nlohmann::ordered_json;

const char* role_name(Role r) {
  switch (r) {
    case Role::Plain: return "plain";
    case Role::Old: return "old";
    case Role::New: return "new";
    case Role::Src: return "src";
  }
  return "?";
}

Role role_from_name(const std::string& s) {
  if (s == "plain") return Role::Plain;
  if (s == "old") return Role::Old;
  if (s == "new") return Role::New;
  if (s == "src") return Role::Src;
  throw ConfigError("unknown model role '" + s + "'");
}

void ModelSpec::validate() const {
  if (input_dim == 0) throw ConfigError("model spec: input_dim must be > 0");
  if (num_classes < 2)
    throw ConfigError("model spec: num_classes must be >= 2");
  for (std::size_t h : hidden)
    if (h == 0) throw ConfigError("model spec: hidden width must be > 0");
  if (pool_k > 0) {
    if (pool_rows == 0 || pool_cols == 0 || pool_rows % pool_k ||
        pool_cols % pool_k)
      throw ConfigError("model spec: pooling grid must divide by pool_k");
    if (pool_rows * pool_cols != input_dim)
      throw ConfigError("model spec: pooling grid does not match input_dim");
  }
}

std::size_t ModelSpec::mlp_input_dim() const {
  if (!has_pool()) return input_dim;
  return (pool_rows / pool_k) * (pool_cols / pool_k);
}

namespace {

// Constant projection matrix for the average-pooling front end.
Tensor pool_matrix(const ModelSpec& spec) {
  const std::size_t r = spec.pool_rows, c = spec.pool_cols, k = spec.pool_k;
  const std::size_t ro = r / k, co = c / k;
  Tensor P({r * c, ro * co});
  const double w = 1.0 / static_cast<double>(k * k);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      P.at(i * c + j, (i / k) * co + (j / k)) = w;
  return P;
}

std::vector<std::size_t> layer_dims(const ModelSpec& spec) {
  std::vector<std::size_t> dims;
  dims.push_back(spec.mlp_input_dim());
  for (std::size_t h : spec.hidden) dims.push_back(h);
  dims.push_back(spec.num_classes);
  return dims;
}

}  // namespace

std::string param_name(std::size_t i) {
  return (i % 2 == 0 ? "W" : "b") + std::to_string(i / 2);
}

Model init_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model m;
  m.spec = spec;
  m.meta.seed = seed;
  m.meta.method = "init";
  const auto dims = layer_dims(spec);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::size_t fan_in = dims[l], fan_out = dims[l + 1];
    const double bound =
        std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Xoshiro256 rng(mix_seed({seed, 0x1417u, l}));
    Tensor W({fan_in, fan_out});
    for (double& w : W.data) w = rng.uniform(-bound, bound);
    m.params.push_back(std::move(W));
    m.params.push_back(Tensor({fan_out}));  // biases start at zero
  }
  return m;
}

Tensor predict_logits_batch(const Model& m, const Tensor& X) {
  if (X.rank() != 2 || X.shape[1] != m.spec.input_dim)
    throw ShapeError("predict: input " + X.shape_str() + " vs input_dim " +
                     std::to_string(m.spec.input_dim));
  Tensor h = X;
  if (m.spec.has_pool()) {
    const Tensor P = pool_matrix(m.spec);
    Tensor pooled({h.shape[0], P.shape[1]});
    detail::matmul_kernel(h, P, pooled);
    h = std::move(pooled);
  }
  const std::size_t L = m.num_layers();
  for (std::size_t l = 0; l < L; ++l) {
    const Tensor& W = m.params[2 * l];
    const Tensor& b = m.params[2 * l + 1];
    Tensor z({h.shape[0], W.shape[1]});
    detail::matmul_kernel(h, W, z);
    Tensor zb({z.shape[0], z.shape[1]});
    detail::add_rowbias_kernel(z, b, zb);
    if (l + 1 < L) {
      Tensor a({zb.shape[0], zb.shape[1]});
      detail::relu_kernel(zb, a);
      h = std::move(a);
    } else {
      h = std::move(zb);
    }
  }
  return h;
}

Tensor predict_logits(const Model& m, const Tensor& x) {
  if (x.rank() != 1)
    throw ShapeError("predict: expected a {d} sample, got " + x.shape_str());
  Tensor X({1, x.shape[0]}, x.data);
  Tensor Z = predict_logits_batch(m, X);
  return Tensor({Z.shape[1]}, std::move(Z.data));
}

int argmax_lowest(const double* row, std::size_t c) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < c; ++j)
    if (row[j] > row[best]) best = j;
  return static_cast<int>(best);
}

int predict_label(const Model& m, const Tensor& x) {
  const Tensor z = predict_logits(m, x);
  return argmax_lowest(z.data.data(), z.size());
}

std::vector<int> predict_labels_batch(const Model& m, const Tensor& X) {
  const Tensor Z = predict_logits_batch(m, X);
  std::vector<int> out(Z.shape[0]);
  for (std::size_t i = 0; i < Z.shape[0]; ++i)
    out[i] = argmax_lowest(Z.data.data() + i * Z.shape[1], Z.shape[1]);
  return out;
}

Tape::NodeId forward_taped(Tape& tape, const Model& m, Tape::NodeId X_node,
                           std::vector<Tape::NodeId>* param_nodes) {
  Tape::NodeId h = X_node;
  if (m.spec.has_pool())
    h = tape.matmul(h, tape.constant(pool_matrix(m.spec)));
  const std::size_t L = m.num_layers();
  for (std::size_t l = 0; l < L; ++l) {
    Tape::NodeId W, b;
    if (param_nodes) {
      Tensor tw = m.params[2 * l];
      Tensor tb = m.params[2 * l + 1];
      tw.requires_grad = true;
      tb.requires_grad = true;
      W = tape.leaf(std::move(tw));
      b = tape.leaf(std::move(tb));
      param_nodes->push_back(W);
      param_nodes->push_back(b);
    } else {
      W = tape.constant(m.params[2 * l]);
      b = tape.constant(m.params[2 * l + 1]);
    }
    h = tape.add(tape.matmul(h, W), b);
    if (l + 1 < L) h = tape.relu(h);
  }
  return h;
}

// ---------------------------------------------------------------------
//  Checkpoints
// ---------------------------------------------------------------------

namespace {

ordered_json spec_to_json(const ModelSpec& s) {
  ordered_json j;
  j["input_dim"] = s.input_dim;
  j["hidden"] = s.hidden;
  j["num_classes"] = s.num_classes;
  if (s.has_pool()) {
    j["pool_rows"] = s.pool_rows;
    j["pool_cols"] = s.pool_cols;
    j["pool_k"] = s.pool_k;
  }
  return j;
}

ModelSpec spec_from_json(const ordered_json& j) {
  ModelSpec s;
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  if (j.contains("pool_k")) {
    s.pool_rows = j.at("pool_rows").get<std::size_t>();
    s.pool_cols = j.at("pool_cols").get<std::size_t>();
    s.pool_k = j.at("pool_k").get<std::size_t>();
  }
  return s;
}

}  // namespace

void save_checkpoint(const Model& m, const std::string& path) {
  ordered_json manifest;
  manifest["format"] = "FLIPGUARD-CKPT-1";
  manifest["spec"] = spec_to_json(m.spec);
  manifest["seed"] = m.meta.seed;
  manifest["meta"] = {{"role", role_name(m.role)},
                      {"method", m.meta.method},
                      {"name", m.meta.name}};
  ordered_json tensors = ordered_json::array();
  std::size_t payload_doubles = 0;
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    tensors.push_back(
        {{"name", param_name(i)}, {"shape", m.params[i].shape}});
    payload_doubles += m.params[i].size();
  }
  manifest["tensors"] = tensors;
  const std::string mjson = manifest.dump(2);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint for writing: " + path);
  f << kCheckpointMagic;
  f << mjson.size() << "\n" << mjson << "\n";
  f << payload_doubles * sizeof(double) << "\n";
  for (const Tensor& t : m.params)
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  if (!f) throw IoError("checkpoint write failed: " + path);
}

namespace {

// Reads an ASCII decimal length terminated by '\n'.
std::size_t read_length_line(std::istream& in, std::size_t& offset,
                             const char* what) {
  std::string line;
  if (!std::getline(in, line))
    throw ParseError(std::string("checkpoint: missing ") + what, offset);
  offset += line.size() + 1;
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(line, &pos);
    if (pos != line.size()) throw std::invalid_argument("trailing bytes");
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ParseError(std::string("checkpoint: bad ") + what + " '" + line +
                         "'",
                     offset - line.size() - 1);
  }
}

}  // namespace

Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::size_t offset = 0;

  std::string magic(std::strlen(kCheckpointMagic), '\0');
  f.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (f.gcount() != static_cast<std::streamsize>(magic.size()) ||
      magic != kCheckpointMagic)
    throw ParseError("checkpoint: bad magic", offset);
  offset += magic.size();

  const std::size_t mlen = read_length_line(f, offset, "manifest length");
  std::string mjson(mlen, '\0');
  f.read(mjson.data(), static_cast<std::streamsize>(mlen));
  if (f.gcount() != static_cast<std::streamsize>(mlen))
    throw ParseError("checkpoint: truncated manifest", offset);
  offset += mlen;
  if (f.get() != '\n')
    throw ParseError("checkpoint: manifest missing terminator", offset);
  ++offset;

  ordered_json manifest;
  try {
    manifest = ordered_json::parse(mjson);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("checkpoint: manifest JSON error: " + std::string(e.what()),
                     offset - mlen - 1 + e.byte);
  }

  Model m;
  try {
    m.spec = spec_from_json(manifest.at("spec"));
    m.meta.seed = manifest.at("seed").get<std::uint64_t>();
    const auto& meta = manifest.at("meta");
    m.role = role_from_name(meta.at("role").get<std::string>());
    m.meta.method = meta.at("method").get<std::string>();
    m.meta.name = meta.at("name").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint: manifest field error: " +
                         std::string(e.what()),
                     offset - mlen - 1);
  }
  m.spec.validate();

  // Shapes must chain exactly as the spec dictates.
  const auto dims = layer_dims(m.spec);
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != 2 * (dims.size() - 1))
    throw IntegrityError("checkpoint: manifest lists " +
                         std::to_string(tensors.size()) +
                         " tensors, spec requires " +
                         std::to_string(2 * (dims.size() - 1)));
  std::size_t payload_doubles = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto shape =
        tensors[i].at("shape").get<std::vector<std::size_t>>();
    const std::size_t l = i / 2;
    const std::vector<std::size_t> want =
        (i % 2 == 0) ? std::vector<std::size_t>{dims[l], dims[l + 1]}
                     : std::vector<std::size_t>{dims[l + 1]};
    if (shape != want)
      throw IntegrityError("checkpoint: tensor " + param_name(i) +
                           " has manifest shape inconsistent with spec");
    Tensor t(shape);
    payload_doubles += t.size();
    m.params.push_back(std::move(t));
  }

  const std::size_t plen = read_length_line(f, offset, "payload length");
  if (plen != payload_doubles * sizeof(double))
    throw IntegrityError("checkpoint: payload length " +
                         std::to_string(plen) + " does not match manifest (" +
                         std::to_string(payload_doubles * sizeof(double)) +
                         " bytes)");
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    Tensor& t = m.params[i];
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (f.gcount() != static_cast<std::streamsize>(t.data.size() *
                                                   sizeof(double)))
      throw IntegrityError("checkpoint: truncated payload at tensor " +
                           param_name(i));
    offset += t.data.size() * sizeof(double);
  }
  if (f.peek() != EOF)
    throw IntegrityError("checkpoint: trailing bytes after payload");
  return m;
}

std::uint64_t model_hash(const Model& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto upd = [&](const void* p, std::size_t n) { h = fnv1a(p, n, h); };
  const std::uint64_t d = m.spec.input_dim, c = m.spec.num_classes;
  upd(&d, sizeof d);
  upd(&c, sizeof c);
  for (std::uint64_t v : m.spec.hidden) upd(&v, sizeof v);
  const std::uint64_t pool[3] = {m.spec.pool_rows, m.spec.pool_cols,
                                 m.spec.pool_k};
  upd(pool, sizeof pool);
  for (const Tensor& t : m.params)
    upd(t.data.data(), t.data.size() * sizeof(double));
  return h;
}

}  // namespace flipguard
