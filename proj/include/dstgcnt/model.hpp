#pragma once

// Full regressor: dense STGC-GRU stack -> frame tokens -> positional encoding
// -> transformer encoders -> pooled linear readout.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "data.hpp"
#include "graph.hpp"
#include "stgc_gru.hpp"
#include "tensor.hpp"
#include "transformer.hpp"

namespace dstgcnt {

struct ModelConfig {
  std::string graph = "kimore";
  std::size_t channels = 3;
  std::vector<std::size_t> hops = {1, 2};
  std::size_t blocks = 3;
  std::size_t augment_channels = 64;
  std::size_t augment_kernel = 9;
  std::size_t graph_channels = 64;
  std::vector<std::size_t> bank_kernels = {9, 15, 20};
  std::size_t bank_filters = 16;
  std::size_t encoder_layers = 2;
  std::size_t num_heads = 6;
  std::size_t head_dim = 128;
  std::size_t model_dim = 128;
  std::size_t ff_hidden = 80;
  double dropout = 0.1;
  double layer_norm_eps = 1e-6;
  GruUpdate gru_update = GruUpdate::paper;
  ReadoutMode readout = ReadoutMode::mean;
  bool positional_encoding = true;
  std::size_t feedback_block = 0;
  int precision = 32;
  std::uint64_t seed = 0;

  std::size_t bank_width() const { return bank_filters * bank_kernels.size(); }

  /// Small widths for gradient checks and desk-scale training runs.
  static ModelConfig tiny() {
    ModelConfig c;
    c.blocks = 2;
    c.augment_channels = 8;
    c.graph_channels = 8;
    c.bank_filters = 4;
    c.encoder_layers = 1;
    c.num_heads = 2;
    c.head_dim = 8;
    c.model_dim = 8;
    c.ff_hidden = 16;
    return c;
  }

  void validate() const {
    if (blocks == 0) fail(ErrorKind::config, "blocks must be at least 1");
    if (augment_kernel % 2 == 0) fail(ErrorKind::config, "augment_kernel must be odd");
    if (bank_kernels.empty()) fail(ErrorKind::config, "bank_kernels must not be empty");
    for (auto k : bank_kernels)
      if (k == 0) fail(ErrorKind::config, "bank kernel length must be positive");
    if (num_heads == 0 || head_dim == 0) fail(ErrorKind::config, "attention needs at least one head of positive size");
    if (positional_encoding && model_dim % 2 != 0) fail(ErrorKind::config, "model_dim must be even for positional encoding");
    if (dropout < 0.0 || dropout >= 1.0) fail(ErrorKind::config, "dropout must lie in [0, 1)");
    if (precision != 32 && precision != 64) fail(ErrorKind::config, "precision must be 32 or 64");
    if (feedback_block >= blocks) fail(ErrorKind::config, "feedback_block must index an existing block");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"graph", c.graph},
      {"channels", c.channels},
      {"hops", c.hops},
      {"blocks", c.blocks},
      {"augment_channels", c.augment_channels},
      {"augment_kernel", c.augment_kernel},
      {"graph_channels", c.graph_channels},
      {"bank_kernels", c.bank_kernels},
      {"bank_filters", c.bank_filters},
      {"encoder_layers", c.encoder_layers},
      {"num_heads", c.num_heads},
      {"head_dim", c.head_dim},
      {"model_dim", c.model_dim},
      {"ff_hidden", c.ff_hidden},
      {"dropout", c.dropout},
      {"layer_norm_eps", c.layer_norm_eps},
      {"gru_update", to_string(c.gru_update)},
      {"readout", to_string(c.readout)},
      {"positional_encoding", c.positional_encoding},
      {"feedback_block", c.feedback_block},
      {"precision", c.precision},
      {"seed", c.seed},
  };
}

/// Reads the keys present in `j` over `base`; unknown keys are rejected.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  static const std::vector<std::string> known = {
      "graph",      "channels",       "hops",      "blocks",    "augment_channels", "augment_kernel",
      "graph_channels", "bank_kernels", "bank_filters", "encoder_layers", "num_heads", "head_dim",
      "model_dim",  "ff_hidden",      "dropout",   "layer_norm_eps", "gru_update", "readout",
      "positional_encoding", "feedback_block", "precision", "seed", "training", "preset"};
  try {
    for (const auto& [key, value] : j.items()) {
      if (std::find(known.begin(), known.end(), key) == known.end()) fail(ErrorKind::config, "unknown config key '" + key + "'");
    }
    if (j.contains("preset")) {
      const auto preset = j.at("preset").get<std::string>();
      if (preset == "tiny") c = ModelConfig::tiny();
      else if (preset != "default") fail(ErrorKind::config, "unknown preset '" + preset + "'");
    }
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("graph", c.graph);
    get("channels", c.channels);
    get("hops", c.hops);
    get("blocks", c.blocks);
    get("augment_channels", c.augment_channels);
    get("augment_kernel", c.augment_kernel);
    get("graph_channels", c.graph_channels);
    get("bank_kernels", c.bank_kernels);
    get("bank_filters", c.bank_filters);
    get("encoder_layers", c.encoder_layers);
    get("num_heads", c.num_heads);
    get("head_dim", c.head_dim);
    get("model_dim", c.model_dim);
    get("ff_hidden", c.ff_hidden);
    get("dropout", c.dropout);
    get("layer_norm_eps", c.layer_norm_eps);
    get("positional_encoding", c.positional_encoding);
    get("feedback_block", c.feedback_block);
    get("precision", c.precision);
    get("seed", c.seed);
    if (j.contains("gru_update")) c.gru_update = parse_gru_update(j.at("gru_update").get<std::string>());
    if (j.contains("readout")) c.readout = parse_readout_mode(j.at("readout").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

enum class InitKind { glorot, zeros, ones };

template <class T>
struct ModelParams {
  AugmentParams<T> augment;
  std::vector<StgcGruBlockParams<T>> blocks;
  Var<T> proj_w, proj_b;  // flattened joint channels -> model_dim
  std::vector<EncoderParams<T>> encoders;
  Var<T> readout_w, readout_b;

  /// Factory signature: (name, shape, init kind) -> leaf.
  using Factory = std::function<Var<T>(const std::string&, const Shape&, InitKind)>;

  static ModelParams build(const ModelConfig& c, std::size_t joints, const Factory& make) {
    ModelParams p;
    p.augment.kernel = make("augment.kernel", {c.augment_kernel, c.channels, c.augment_channels}, InitKind::glorot);
    p.augment.bias = make("augment.bias", {c.augment_channels}, InitKind::zeros);
    std::size_t in_channels = c.channels + c.augment_channels;
    const std::size_t g = c.graph_channels;
    const std::size_t n_ops = 1 + std::count_if(c.hops.begin(), c.hops.end(), [](auto k) { return k != 0; });
    for (std::size_t b = 0; b < c.blocks; ++b) {
      const std::string pre = "block" + std::to_string(b) + ".";
      StgcGruBlockParams<T> blk;
      for (std::size_t k = 0; k < n_ops; ++k) {
        blk.graph_weights.push_back(make(pre + "graph.w" + std::to_string(k), {in_channels, g}, InitKind::glorot));
      }
      auto& u = blk.gru;
      u.w_zx = make(pre + "gru.w_zx", {g, g}, InitKind::glorot);
      u.w_zh = make(pre + "gru.w_zh", {g, g}, InitKind::glorot);
      u.b_z = make(pre + "gru.b_z", {g}, InitKind::zeros);
      u.w_rx = make(pre + "gru.w_rx", {g, g}, InitKind::glorot);
      u.w_rh = make(pre + "gru.w_rh", {g, g}, InitKind::glorot);
      u.b_r = make(pre + "gru.b_r", {g}, InitKind::zeros);
      u.w_ox = make(pre + "gru.w_ox", {g, g}, InitKind::glorot);
      u.w_oh = make(pre + "gru.w_oh", {g, g}, InitKind::glorot);
      u.b_o = make(pre + "gru.b_o", {g}, InitKind::zeros);
      for (std::size_t i = 0; i < c.bank_kernels.size(); ++i) {
        const std::string bp = pre + "bank" + std::to_string(i);
        blk.bank.kernels.push_back(make(bp + ".kernel", {c.bank_kernels[i], g, c.bank_filters}, InitKind::glorot));
        blk.bank.biases.push_back(make(bp + ".bias", {c.bank_filters}, InitKind::zeros));
      }
      p.blocks.push_back(std::move(blk));
      in_channels += c.bank_width();
    }
    const std::size_t d = c.model_dim;
    p.proj_w = make("encoder.input_proj.w", {joints * c.bank_width(), d}, InitKind::glorot);
    p.proj_b = make("encoder.input_proj.b", {d}, InitKind::zeros);
    for (std::size_t l = 0; l < c.encoder_layers; ++l) {
      const std::string pre = "encoder" + std::to_string(l) + ".";
      EncoderParams<T> e;
      e.ln1_gain = make(pre + "ln1.gain", {d}, InitKind::ones);
      e.ln1_bias = make(pre + "ln1.bias", {d}, InitKind::zeros);
      for (std::size_t h = 0; h < c.num_heads; ++h) {
        const std::string hp = pre + "head" + std::to_string(h) + ".";
        e.heads.push_back({make(hp + "wq", {d, c.head_dim}, InitKind::glorot), make(hp + "wk", {d, c.head_dim}, InitKind::glorot),
                           make(hp + "wv", {d, c.head_dim}, InitKind::glorot)});
      }
      e.w_o = make(pre + "w_o", {c.num_heads * c.head_dim, d}, InitKind::glorot);
      e.ln2_gain = make(pre + "ln2.gain", {d}, InitKind::ones);
      e.ln2_bias = make(pre + "ln2.bias", {d}, InitKind::zeros);
      e.ff1_w = make(pre + "ff1.w", {d, c.ff_hidden}, InitKind::glorot);
      e.ff1_b = make(pre + "ff1.b", {c.ff_hidden}, InitKind::zeros);
      e.ff2_w = make(pre + "ff2.w", {c.ff_hidden, d}, InitKind::glorot);
      e.ff2_b = make(pre + "ff2.b", {d}, InitKind::zeros);
      p.encoders.push_back(std::move(e));
    }
    p.readout_w = make("readout.w", {d, 1}, InitKind::glorot);
    p.readout_b = make("readout.b", {1}, InitKind::zeros);
    return p;
  }

  /// Uniform(+-sqrt(6 / (fan_in + fan_out))) weights, zero biases, unit gains.
  static ModelParams init(const ModelConfig& c, std::size_t joints, std::uint64_t seed) {
    Rng rng(substream_seed(seed, "init"));
    return build(c, joints, [&](const std::string&, const Shape& s, InitKind kind) {
      std::vector<T> data(numel(s), kind == InitKind::ones ? T{1} : T{0});
      if (kind == InitKind::glorot) {
        const std::size_t receptive = s.size() == 3 ? s[0] : 1;
        const double fan_in = static_cast<double>(receptive * s[s.size() - 2]);
        const double fan_out = static_cast<double>(receptive * s.back());
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : data) v = static_cast<T>(rng.uniform(-limit, limit));
      }
      return parameter<T>(s, std::move(data));
    });
  }

  /// Ordered (name, parameter) registry.
  std::vector<std::pair<std::string, Var<T>>> named() const {
    std::vector<std::pair<std::string, Var<T>>> out;
    auto add = [&](std::string name, const Var<T>& v) { out.emplace_back(std::move(name), v); };
    add("augment.kernel", augment.kernel);
    add("augment.bias", augment.bias);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string pre = "block" + std::to_string(b) + ".";
      const auto& blk = blocks[b];
      for (std::size_t k = 0; k < blk.graph_weights.size(); ++k) add(pre + "graph.w" + std::to_string(k), blk.graph_weights[k]);
      const auto& u = blk.gru;
      add(pre + "gru.w_zx", u.w_zx);
      add(pre + "gru.w_zh", u.w_zh);
      add(pre + "gru.b_z", u.b_z);
      add(pre + "gru.w_rx", u.w_rx);
      add(pre + "gru.w_rh", u.w_rh);
      add(pre + "gru.b_r", u.b_r);
      add(pre + "gru.w_ox", u.w_ox);
      add(pre + "gru.w_oh", u.w_oh);
      add(pre + "gru.b_o", u.b_o);
      for (std::size_t i = 0; i < blk.bank.kernels.size(); ++i) {
        const std::string bp = pre + "bank" + std::to_string(i);
        add(bp + ".kernel", blk.bank.kernels[i]);
        add(bp + ".bias", blk.bank.biases[i]);
      }
    }
    add("encoder.input_proj.w", proj_w);
    add("encoder.input_proj.b", proj_b);
    for (std::size_t l = 0; l < encoders.size(); ++l) {
      const std::string pre = "encoder" + std::to_string(l) + ".";
      const auto& e = encoders[l];
      add(pre + "ln1.gain", e.ln1_gain);
      add(pre + "ln1.bias", e.ln1_bias);
      for (std::size_t h = 0; h < e.heads.size(); ++h) {
        const std::string hp = pre + "head" + std::to_string(h) + ".";
        add(hp + "wq", e.heads[h].wq);
        add(hp + "wk", e.heads[h].wk);
        add(hp + "wv", e.heads[h].wv);
      }
      add(pre + "w_o", e.w_o);
      add(pre + "ln2.gain", e.ln2_gain);
      add(pre + "ln2.bias", e.ln2_bias);
      add(pre + "ff1.w", e.ff1_w);
      add(pre + "ff1.b", e.ff1_b);
      add(pre + "ff2.w", e.ff2_w);
      add(pre + "ff2.b", e.ff2_b);
    }
    add("readout.w", readout_w);
    add("readout.b", readout_b);
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : named()) n += v.numel();
    return n;
  }

  /// Deep copy in another precision (or the same one).
  template <class U>
  ModelParams<U> cast(const ModelConfig& c, std::size_t joints) const {
    std::map<std::string, Var<T>> by_name;
    for (const auto& [name, v] : named()) by_name.emplace(name, v);
    return ModelParams<U>::build(c, joints, [&](const std::string& name, const Shape& s, InitKind) {
      const Var<T>& src = by_name.at(name);
      if (src.shape() != s) fail(ErrorKind::config, "parameter " + name + " has shape " + shape_str(src.shape()));
      std::vector<U> data(src.numel());
      for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<U>(src.value()[i]);
      return parameter<U>(s, std::move(data));
    });
  }

  void zero_grad() {
    for (auto& [name, v] : named()) v.zero_grad();
  }
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

template <class T>
struct ForwardResult {
  Var<T> scores;                       // [B]
  std::vector<Var<T>> attention_maps;  // per block, [B, T, N, N]
};

template <class T>
class Model {
 public:
  Model(ModelConfig config, JointGraph graph, ModelParams<T> params)
      : config_(std::move(config)), graph_(std::move(graph)), params_(std::move(params)),
        context_(GraphContext<T>::build(graph_, config_.hops)) {}

  static Model create(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    JointGraph g = load_graph(config.graph);
    return Model(config, g, ModelParams<T>::init(config, g.num_joints, seed));
  }

  static Model create(const ModelConfig& config, const JointGraph& g, std::uint64_t seed) {
    config.validate();
    return Model(config, g, ModelParams<T>::init(config, g.num_joints, seed));
  }

  const ModelConfig& config() const { return config_; }
  const JointGraph& graph() const { return graph_; }
  const ModelParams<T>& params() const { return params_; }
  ModelParams<T>& params() { return params_; }
  const GraphContext<T>& context() const { return context_; }

  /// input is [B, T, N, C]; mask is [B*T] (empty: all frames valid).
  ForwardResult<T> forward(const Var<T>& input, const std::vector<T>& mask, const ForwardOptions& opt = {}) const {
    if (input.rank() != 4) fail(ErrorKind::shape, "model input must be [B, T, N, C], got " + shape_str(input.shape()));
    if (input.dim(2) != graph_.num_joints || input.dim(3) != config_.channels) {
      fail(ErrorKind::config, "input has " + std::to_string(input.dim(2)) + " joints x " + std::to_string(input.dim(3)) +
                                  " channels; model expects " + std::to_string(graph_.num_joints) + " x " +
                                  std::to_string(config_.channels));
    }
    const std::size_t b_len = input.dim(0), t_len = input.dim(1);
    DenseOutput<T> dense = dense_forward(input, params_.augment, params_.blocks, context_, mask, config_.gru_update);

    Var<T> tokens = reshape(dense.features, {b_len, t_len, graph_.num_joints * config_.bank_width()});
    tokens = affine(tokens, params_.proj_w, params_.proj_b);
    if (config_.positional_encoding) {
      tokens = add_trailing(tokens, constant<T>({t_len, config_.model_dim}, positional_encoding<T>(t_len, config_.model_dim)));
    }
    tokens = mask_frames(tokens, mask);
    for (std::size_t l = 0; l < params_.encoders.size(); ++l) {
      EncoderOptions eo{config_.dropout, config_.layer_norm_eps, opt.training, substream_seed(opt.dropout_seed, "encoder", l)};
      tokens = encoder_block(tokens, params_.encoders[l], mask, eo);
    }
    return {readout(tokens, mask, params_.readout_w, params_.readout_b, config_.readout), std::move(dense.attention_maps)};
  }

  ForwardResult<T> forward(const Batch& batch, const ForwardOptions& opt = {}) const {
    return forward(batch_input<T>(batch), batch_mask<T>(batch), opt);
  }

  /// Scores without recording a graph.
  std::vector<double> predict(const std::vector<LabeledSample>& samples, std::size_t batch_size = 16) const {
    NoGradGuard no_grad;
    std::vector<double> out;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
      std::vector<LabeledSample> chunk(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                       samples.begin() + static_cast<std::ptrdiff_t>(std::min(samples.size(), start + batch_size)));
      const auto r = forward(make_batch(std::move(chunk)));
      for (T v : r.scores.value()) out.push_back(static_cast<double>(v));
    }
    return out;
  }

  template <class U>
  static Var<U> batch_input(const Batch& b) {
    std::vector<U> data(b.frames.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<U>(b.frames[i]);
    return constant<U>({b.size(), b.max_frames, b.joints, b.channels}, std::move(data));
  }

  template <class U>
  static std::vector<U> batch_mask(const Batch& b) {
    return std::vector<U>(b.mask.begin(), b.mask.end());
  }

 private:
  ModelConfig config_;
  JointGraph graph_;
  ModelParams<T> params_;
  GraphContext<T> context_;
};

// ---------------------------------------------------------------------------
// Checkpoints: {"format_version", "precision", "config", "graph", "params": [{"name", "shape", "data"}]}

inline constexpr int checkpoint_format_version = 1;

template <class T>
nlohmann::json checkpoint_json(const Model<T>& model) {
  nlohmann::json j;
  j["format_version"] = checkpoint_format_version;
  j["precision"] = sizeof(T) == 4 ? 32 : 64;
  j["config"] = to_json(model.config());
  j["graph"] = graph_to_json(model.graph());
  j["params"] = nlohmann::json::array();
  for (const auto& [name, v] : model.params().named()) {
    nlohmann::json data = nlohmann::json::array();
    for (T x : v.value()) data.push_back(static_cast<double>(x));
    j["params"].push_back({{"name", name}, {"shape", v.shape()}, {"data", std::move(data)}});
  }
  return j;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write checkpoint " + path.string());
  out << checkpoint_json(model).dump() << '\n';
}

template <class T>
Model<T> model_from_checkpoint_json(const nlohmann::json& j) {
  try {
    if (j.at("format_version").get<int>() != checkpoint_format_version) {
      fail(ErrorKind::format, "unsupported checkpoint format_version");
    }
    const ModelConfig config = model_config_from_json(j.at("config"));
    const JointGraph graph = j.contains("graph") ? graph_from_json(j.at("graph")) : load_graph(config.graph);
    std::map<std::string, const nlohmann::json*> by_name;
    for (const auto& p : j.at("params")) by_name.emplace(p.at("name").get<std::string>(), &p);
    auto params = ModelParams<T>::build(config, graph.num_joints, [&](const std::string& name, const Shape& s, InitKind) {
      auto it = by_name.find(name);
      if (it == by_name.end()) fail(ErrorKind::format, "checkpoint lacks parameter " + name);
      const auto& p = *it->second;
      if (p.at("shape").get<Shape>() != s) fail(ErrorKind::format, "checkpoint parameter " + name + " has the wrong shape");
      std::vector<T> data;
      data.reserve(numel(s));
      for (const auto& x : p.at("data")) data.push_back(static_cast<T>(x.get<double>()));
      if (data.size() != numel(s)) fail(ErrorKind::format, "checkpoint parameter " + name + " has the wrong length");
      return parameter<T>(s, std::move(data));
    });
    return Model<T>(config, graph, std::move(params));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("checkpoint: ") + e.what());
  }
}

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "checkpoint " + path.string() + ": " + e.what());
  }
  return model_from_checkpoint_json<T>(j);
}

inline int checkpoint_precision(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    return j.at("precision").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace dstgcnt
