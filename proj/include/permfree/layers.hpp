#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "permfree/tensor.hpp"

namespace permfree {

// Named parameter tensors with hierarchical dotted names (enc.sd.0.blstm.0.fwd.w_x).
// Every parameter requires grad. Creation draws from a per-name stream of the
// store seed, so parameter values do not depend on registration order.
// Default initializer is Uniform(-0.1, 0.1).
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed) : seed_rng_(seed) {}

  Tensor create(const std::string& name, const Shape& shape);
  Tensor create_zeros(const std::string& name, const Shape& shape);
  Tensor create_const(const std::string& name, const Shape& shape, double v);

  Tensor get(const std::string& name) const;
  bool has(const std::string& name) const { return params_.count(name) > 0; }
  // Registration order; also the blob order of the checkpoint format.
  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return order_.size(); }

  void zero_grad();
  int64_t param_count() const;

  // Overwrite one parameter's values (transfer, tests). Shape must match.
  void assign(const std::string& name, const std::vector<double>& values);

  static constexpr uint32_t kFormatVersion = 1;

 private:
  Tensor insert(const std::string& name, Tensor t);

  SplitRng seed_rng_;
  std::map<std::string, Tensor> params_;
  std::vector<std::string> order_;
};

// Versioned checkpoint: 8-byte magic, little-endian u32 format version,
// u64 JSON header length, JSON header (user config + parameter names/shapes,
// dtype float64, lstm gate order "ifgo"), then raw float64 blobs in header
// order.
void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::string& config_json);
// Returns the embedded config JSON; parameters are created in the store
// (which must be empty).
std::string load_checkpoint(const std::string& path, ParamStore& store);

struct LstmParams {
  Tensor w_x;  // 4H×In, gate order i,f,g,o
  Tensor w_h;  // 4H×H
  Tensor b;    // 4H
};

struct LstmState {
  Tensor h;
  Tensor c;
};

LstmParams make_lstm_params(ParamStore& store, const std::string& prefix, int input_dim,
                            int hidden);
LstmState lstm_initial_state(int hidden);

// One gated recurrence step; returns the new hidden as output.
std::pair<Tensor, LstmState> lstm_step(const Tensor& x, const LstmState& state,
                                       const LstmParams& p);

struct BlstmParams {
  LstmParams fwd;
  LstmParams bwd;
  Tensor proj_f_w, proj_f_b;  // (P/2)×H projection per direction
  Tensor proj_b_w, proj_b_b;
  int hidden = 0;
  int proj = 0;  // total output width (both directions concatenated)
};

BlstmParams make_blstm_params(ParamStore& store, const std::string& prefix, int input_dim,
                              int hidden, int proj);

// Bidirectional layer over a T×In sequence; output T×proj, forward and
// backward projections concatenated.
Tensor blstm_layer(const Tensor& xs, const BlstmParams& p);

struct ConvLayerParams {
  Tensor w;  // out×in×k×k
  Tensor b;  // out
};

ConvLayerParams make_conv_params(ParamStore& store, const std::string& prefix,
                                 int in_channels, int out_channels, int filter);

struct VggBlockParams {
  std::vector<ConvLayerParams> convs;
  bool pool = true;  // 2×2 stride-2 maxpool after the conv stack
};

// conv(+relu) stack over a channels×time×freq image, optional pooling.
// Each pool halves time and freq with ceil semantics.
Tensor vgg_block(const Tensor& image, const VggBlockParams& p);

struct LinearParams {
  Tensor w;  // out×in
  Tensor b;  // out
};

LinearParams make_linear_params(ParamStore& store, const std::string& prefix, int in,
                                int out);

Tensor linear(const Tensor& x, const LinearParams& p);          // 1-d in
Tensor linear_rows(const Tensor& xs, const LinearParams& p);    // T×in -> T×out

}  // namespace permfree
