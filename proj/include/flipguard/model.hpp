#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flipguard/tensor.hpp"

namespace flipguard {

// Reporting role of a classifier within an update experiment.
enum class Role : std::uint8_t { Plain, Old, New, Src };

const char* role_name(Role r);
Role role_from_name(const std::string& s);

// Feed-forward relu MLP architecture. An optional non-overlapping 2-D
// average-pooling front end (for small image grids) is folded into the
// forward pass as a constant linear map; it has no trainable weights.
struct ModelSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;
  std::size_t num_classes = 0;
  // Pooling front end: input viewed as pool_rows x pool_cols grid,
  // averaged over pool_k x pool_k blocks. pool_k == 0 disables it.
  std::size_t pool_rows = 0, pool_cols = 0, pool_k = 0;

  void validate() const;
  bool has_pool() const { return pool_k > 0; }
  std::size_t mlp_input_dim() const;  // after pooling, if any
  bool operator==(const ModelSpec&) const = default;
};

struct ModelMeta {
  std::uint64_t seed = 0;   // initialization seed
  std::string method;       // how the weights were produced
  std::string name;         // zoo / experiment identifier
};

struct Model {
  ModelSpec spec;
  std::vector<Tensor> params;  // W0,b0,W1,b1,... shapes chain through spec
  Role role = Role::Plain;
  ModelMeta meta;

  std::size_t num_layers() const { return params.size() / 2; }
};

// "W0", "b0", "W1", ... in parameter order.
std::string param_name(std::size_t index);

// Glorot-uniform weights, zero biases, drawn from the xoshiro256**
// stream derived from (seed, layer). Same seed, same bits.
Model init_model(const ModelSpec& spec, std::uint64_t seed);

// Batch forward: X is {m, d}, result {m, c}. Uses the same kernels as
// the taped forward, so taped and plain evaluation agree bit-for-bit.
Tensor predict_logits_batch(const Model& m, const Tensor& X);
Tensor predict_logits(const Model& m, const Tensor& x);  // x {d} -> {c}

// Argmax with ties broken toward the lowest class index.
int argmax_lowest(const double* row, std::size_t c);
int predict_label(const Model& m, const Tensor& x);
std::vector<int> predict_labels_batch(const Model& m, const Tensor& X);

// Records the model forward on a tape. X_node must hold a {m, d} value.
// When param_nodes is given, parameters are added as gradient-tracked
// leaves and their node ids returned there (for training); otherwise
// parameters enter as constants (for attacks).
Tape::NodeId forward_taped(Tape& tape, const Model& m, Tape::NodeId X_node,
                           std::vector<Tape::NodeId>* param_nodes = nullptr);

// Checkpoint file: magic line, decimal manifest length, JSON manifest
// (spec, seed, metadata, per-tensor shapes), decimal payload length,
// then raw little-endian float64 weights in manifest order. Logits of
// a reloaded model match the saved model exactly.
inline constexpr const char* kCheckpointMagic = "FLIPGUARD-CKPT-1\n";

void save_checkpoint(const Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);

// Content hash over spec and weights; keys attack streams and caches.
std::uint64_t model_hash(const Model& m);

}  // namespace flipguard
