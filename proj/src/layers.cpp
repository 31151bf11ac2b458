#include "permfree/layers.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace permfree {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint and feature formats assume a little-endian host");

Tensor ParamStore::insert(const std::string& name, Tensor t) {
  if (params_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  t.set_requires_grad(true);
  params_.emplace(name, t);
  order_.push_back(name);
  return t;
}

Tensor ParamStore::create(const std::string& name, const Shape& shape) {
  SplitRng rng = seed_rng_.split(name);
  return insert(name, Tensor::uniform(shape, -0.1, 0.1, rng));
}

Tensor ParamStore::create_zeros(const std::string& name, const Shape& shape) {
  return insert(name, Tensor::zeros(shape));
}

Tensor ParamStore::create_const(const std::string& name, const Shape& shape, double v) {
  return insert(name, Tensor::full(shape, v));
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter name: " + name);
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

int64_t ParamStore::param_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void ParamStore::assign(const std::string& name, const std::vector<double>& values) {
  Tensor t = get(name);
  if (values.size() != t.value().size()) {
    throw ConfigError("assign: size mismatch for " + name);
  }
  t.raw_value() = values;
}

namespace {
constexpr char kCkptMagic[8] = {'P', 'F', 'C', 'K', 'P', 'T', '0', '1'};
}

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::string& config_json) {
  json header;
  header["format_version"] = ParamStore::kFormatVersion;
  header["dtype"] = "float64";
  header["byte_order"] = "little";
  header["lstm_gate_order"] = "ifgo";
  header["config"] = config_json.empty() ? json::object() : json::parse(config_json);
  json plist = json::array();
  for (const auto& name : store.names()) {
    Tensor t = store.get(name);
    plist.push_back({{"name", name}, {"shape", t.shape()}});
  }
  header["params"] = plist;
  const std::string htext = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path);
  os.write(kCkptMagic, 8);
  const uint32_t version = ParamStore::kFormatVersion;
  os.write(reinterpret_cast<const char*>(&version), 4);
  const uint64_t hlen = htext.size();
  os.write(reinterpret_cast<const char*>(&hlen), 8);
  os.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const auto& name : store.names()) {
    const auto& v = store.get(name).value();
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!os) throw DataError("failed writing checkpoint: " + path);
}

std::string load_checkpoint(const std::string& path, ParamStore& store) {
  if (store.size() != 0) throw ConfigError("load_checkpoint expects an empty store");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCkptMagic, 8) != 0) {
    throw DataError("not a checkpoint file: " + path);
  }
  uint32_t version = 0;
  is.read(reinterpret_cast<char*>(&version), 4);
  if (version != ParamStore::kFormatVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  uint64_t hlen = 0;
  is.read(reinterpret_cast<char*>(&hlen), 8);
  std::string htext(hlen, '\0');
  is.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw DataError("truncated checkpoint header: " + path);
  json header = json::parse(htext);
  for (const auto& p : header.at("params")) {
    const std::string name = p.at("name").get<std::string>();
    const Shape shape = p.at("shape").get<Shape>();
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!is) throw DataError("truncated checkpoint blob for " + name);
    store.create_zeros(name, shape);
    store.assign(name, v);
  }
  return header.at("config").dump();
}

// ---------------------------------------------------------------------------
// lstm / blstm
// ---------------------------------------------------------------------------

LstmParams make_lstm_params(ParamStore& store, const std::string& prefix, int input_dim,
                            int hidden) {
  LstmParams p;
  p.w_x = store.create(prefix + ".w_x", {4 * hidden, input_dim});
  p.w_h = store.create(prefix + ".w_h", {4 * hidden, hidden});
  p.b = store.create(prefix + ".b", {4 * hidden});
  return p;
}

LstmState lstm_initial_state(int hidden) {
  return {Tensor::zeros({hidden}), Tensor::zeros({hidden})};
}

std::pair<Tensor, LstmState> lstm_step(const Tensor& x, const LstmState& state,
                                       const LstmParams& p) {
  const int hidden = state.h.dim(0);
  if (4 * hidden != p.w_x.dim(0) || x.dim(0) != p.w_x.dim(1)) {
    throw NumericError("lstm_step: dimension mismatch x=" + shape_str(x.shape()) +
                       " w_x=" + shape_str(p.w_x.shape()));
  }
  Tensor gates = add(add(matvec(p.w_x, x), matvec(p.w_h, state.h)), p.b);
  Tensor i = sigmoid(slice(gates, 0, 0, hidden));
  Tensor f = sigmoid(slice(gates, 0, hidden, hidden));
  Tensor g = tanh(slice(gates, 0, 2 * hidden, hidden));
  Tensor o = sigmoid(slice(gates, 0, 3 * hidden, hidden));
  Tensor c_new = add(mul(f, state.c), mul(i, g));
  Tensor h_new = mul(o, tanh(c_new));
  return {h_new, LstmState{h_new, c_new}};
}

BlstmParams make_blstm_params(ParamStore& store, const std::string& prefix, int input_dim,
                              int hidden, int proj) {
  if (proj % 2 != 0) throw ConfigError("blstm projection width must be even: " + prefix);
  BlstmParams p;
  p.fwd = make_lstm_params(store, prefix + ".fwd", input_dim, hidden);
  p.bwd = make_lstm_params(store, prefix + ".bwd", input_dim, hidden);
  p.proj_f_w = store.create(prefix + ".proj_f.w", {proj / 2, hidden});
  p.proj_f_b = store.create(prefix + ".proj_f.b", {proj / 2});
  p.proj_b_w = store.create(prefix + ".proj_b.w", {proj / 2, hidden});
  p.proj_b_b = store.create(prefix + ".proj_b.b", {proj / 2});
  p.hidden = hidden;
  p.proj = proj;
  return p;
}

Tensor blstm_layer(const Tensor& xs, const BlstmParams& p) {
  if (xs.ndim() != 2 || xs.dim(0) < 1) {
    throw NumericError("blstm_layer: expects a non-empty T×In sequence");
  }
  const int t = xs.dim(0);
  std::vector<Tensor> h_fwd(static_cast<size_t>(t)), h_bwd(static_cast<size_t>(t));
  LstmState sf = lstm_initial_state(p.hidden);
  for (int i = 0; i < t; ++i) {
    auto [h, s] = lstm_step(row(xs, i), sf, p.fwd);
    h_fwd[static_cast<size_t>(i)] = h;
    sf = s;
  }
  LstmState sb = lstm_initial_state(p.hidden);
  for (int i = t - 1; i >= 0; --i) {
    auto [h, s] = lstm_step(row(xs, i), sb, p.bwd);
    h_bwd[static_cast<size_t>(i)] = h;
    sb = s;
  }
  std::vector<Tensor> rows(static_cast<size_t>(t));
  for (int i = 0; i < t; ++i) {
    Tensor pf = add(matvec(p.proj_f_w, h_fwd[static_cast<size_t>(i)]), p.proj_f_b);
    Tensor pb = add(matvec(p.proj_b_w, h_bwd[static_cast<size_t>(i)]), p.proj_b_b);
    rows[static_cast<size_t>(i)] = concat(pf, pb, 0);
  }
  return stack_rows(rows);
}

// ---------------------------------------------------------------------------
// convolution blocks / linear
// ---------------------------------------------------------------------------

ConvLayerParams make_conv_params(ParamStore& store, const std::string& prefix,
                                 int in_channels, int out_channels, int filter) {
  ConvLayerParams p;
  p.w = store.create(prefix + ".w", {out_channels, in_channels, filter, filter});
  p.b = store.create(prefix + ".b", {out_channels});
  return p;
}

Tensor vgg_block(const Tensor& image, const VggBlockParams& p) {
  Tensor x = image;
  for (const auto& conv : p.convs) {
    x = relu(conv2d(x, conv.w, conv.b));
  }
  if (p.pool) x = maxpool2d(x, 2, 2, 2, 2);
  return x;
}

LinearParams make_linear_params(ParamStore& store, const std::string& prefix, int in,
                                int out) {
  LinearParams p;
  p.w = store.create(prefix + ".w", {out, in});
  p.b = store.create(prefix + ".b", {out});
  return p;
}

Tensor linear(const Tensor& x, const LinearParams& p) { return add(matvec(p.w, x), p.b); }

Tensor linear_rows(const Tensor& xs, const LinearParams& p) {
  return add(matmul(xs, transpose(p.w)), p.b);
}

}  // namespace permfree
