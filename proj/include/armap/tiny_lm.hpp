#pragma once

// A desk-scale pre-norm transformer with one weight layout and two
// likelihoods: causal (autoregressive) and bidirectional mask prediction
// (masked diffusion). Forward passes run in double precision.
//
// Weight naming:
//   embed.tok [V, d]      embed.pos [max_seq, d]
//   layers.{i}.attn.{wq,wk,wv,wo} [d, d]
//   layers.{i}.mlp.w1 [d_ff, d]   layers.{i}.mlp.w2 [d, d_ff]
//   layers.{i}.{ln1,ln2}.{g,b} [d]
//   final_ln.{g,b} [d]    lm_head [V, d]
// Linear maps are y = W x with W stored [out, in].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "armap/checkpoint.hpp"
#include "armap/error.hpp"
#include "armap/philox.hpp"

namespace armap::lm {

using Tokens = std::vector<int>;

enum class Mode { AR, Diffusion };

inline std::string mode_name(Mode m) { return m == Mode::AR ? "AR" : "DIFFUSION"; }

struct ModelConfig {
  int vocab_size = 64;
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 2;
  int d_ff = 64;
  int max_seq = 32;
  Mode mode = Mode::AR;

  int mask_id() const { return vocab_size - 1; }
  int pad_id() const { return vocab_size - 2; }
  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ValueError("invalid model config: " + m); };
    if (vocab_size < 4) fail("vocab_size must be >= 4");
    if (d_model < 1 || n_heads < 1 || n_layers < 0 || d_ff < 1) fail("dimensions must be positive");
    if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
    if (max_seq < 2) fail("max_seq must be >= 2");
  }

  nlohmann::ordered_json to_json() const {
    return {{"vocab_size", vocab_size}, {"d_model", d_model}, {"n_layers", n_layers},
            {"n_heads", n_heads},       {"d_ff", d_ff},       {"max_seq", max_seq},
            {"mode", mode_name(mode)}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
      c.vocab_size = j.at("vocab_size").get<int>();
      c.d_model = j.at("d_model").get<int>();
      c.n_layers = j.at("n_layers").get<int>();
      c.n_heads = j.at("n_heads").get<int>();
      c.d_ff = j.at("d_ff").get<int>();
      c.max_seq = j.at("max_seq").get<int>();
      const auto mode = j.at("mode").get<std::string>();
      if (mode == "AR") {
        c.mode = Mode::AR;
      } else if (mode == "DIFFUSION") {
        c.mode = Mode::Diffusion;
      } else {
        throw FormatError("config mode must be AR or DIFFUSION, got " + mode);
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed model config: ") + e.what());
    }
    c.validate();
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline ModelConfig load_config(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return ModelConfig::from_json(j);
}

inline void save_config(const ModelConfig& c, const std::filesystem::path& path) {
  write_file_atomic(path, c.to_json().dump(2) + "\n");
}

/// Expected (name, shape) layout for a config.
inline std::vector<std::pair<std::string, Shape>> weight_layout(const ModelConfig& c) {
  const auto V = static_cast<std::size_t>(c.vocab_size);
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto f = static_cast<std::size_t>(c.d_ff);
  std::vector<std::pair<std::string, Shape>> out = {
      {"embed.tok", {V, d}},
      {"embed.pos", {static_cast<std::size_t>(c.max_seq), d}},
      {"final_ln.g", {d}},
      {"final_ln.b", {d}},
      {"lm_head", {V, d}},
  };
  for (int i = 0; i < c.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    for (const char* w : {"wq", "wk", "wv", "wo"}) out.push_back({p + "attn." + w, {d, d}});
    out.push_back({p + "mlp.w1", {f, d}});
    out.push_back({p + "mlp.w2", {d, f}});
    for (const char* ln : {"ln1", "ln2"}) {
      out.push_back({p + ln + ".g", {d}});
      out.push_back({p + ln + ".b", {d}});
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline constexpr double kInitStd = 0.02;

/// Deterministic weights: N(0, 0.02^2) matrices, unit gains, zero biases.
/// Each tensor draws from its own stream keyed by (seed, name).
inline Checkpoint init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Checkpoint c;
  for (auto& [name, shape] : weight_layout(config)) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    std::vector<float> v(n);
    const bool is_gain = name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0;
    const bool is_bias = name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0;
    if (is_gain) {
      std::fill(v.begin(), v.end(), 1.0f);
    } else if (!is_bias) {
      const rng::Stream stream(seed, rng::fnv1a(name));
      for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<float>(kInitStd * stream.normal(i));
    }
    c.add(name, shape, std::move(v));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Forward pass

enum class Attention { Causal, Bidirectional };

namespace detail {

inline void layer_norm(std::span<const double> x, std::span<const double> g, std::span<const double> b,
                       std::span<double> out) {
  constexpr double kEps = 1e-5;
  const auto n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + kEps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * inv * g[i] + b[i];
}

// out[r] = sum_c w[r, c] * x[c]
inline void matvec(const std::vector<double>& w, std::size_t rows, std::size_t cols,
                   std::span<const double> x, std::span<double> out) {
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    const double* row = w.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) s += row[c] * x[c];
    out[r] = s;
  }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

}  // namespace detail

/// Log-softmax of one logit row, max-subtracted.
inline std::vector<double> log_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

/// Weights bound to a config, widened to double. Immutable once built, so a
/// single Model can serve concurrent evaluations.
class Model {
 public:
  Model(ModelConfig config, const Checkpoint& weights) : cfg_(config) {
    cfg_.validate();
    CompatReport report;
    const auto layout = weight_layout(cfg_);
    for (const auto& [name, shape] : layout) {
      if (!weights.contains(name)) {
        report.missing_in_b.push_back(name);
      } else if (weights.at(name).shape != shape) {
        report.shape_mismatches.push_back({name, shape, weights.at(name).shape});
      }
    }
    for (const auto& [name, _] : weights) {
      if (!std::binary_search(layout.begin(), layout.end(), std::pair<std::string, Shape>{name, {}},
                              [](const auto& a, const auto& b) { return a.first < b.first; })) {
        report.missing_in_a.push_back(name);
      }
    }
    report.compatible = report.missing_in_a.empty() && report.missing_in_b.empty() &&
                        report.shape_mismatches.empty();
    if (!report.compatible) {
      throw ShapeError("weights do not match model config: " + report.summary(), report);
    }
    auto grab = [&](const std::string& name) {
      const auto& v = weights.at(name).values;
      return std::vector<double>(v.begin(), v.end());
    };
    tok_ = grab("embed.tok");
    pos_ = grab("embed.pos");
    final_g_ = grab("final_ln.g");
    final_b_ = grab("final_ln.b");
    head_ = grab("lm_head");
    for (int i = 0; i < cfg_.n_layers; ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      layers_.push_back(Layer{grab(p + "attn.wq"), grab(p + "attn.wk"), grab(p + "attn.wv"),
                              grab(p + "attn.wo"), grab(p + "mlp.w1"), grab(p + "mlp.w2"),
                              grab(p + "ln1.g"), grab(p + "ln1.b"), grab(p + "ln2.g"),
                              grab(p + "ln2.b")});
    }
  }

  const ModelConfig& config() const { return cfg_; }

  /// Logits for every position, row-major [T, V].
  std::vector<double> logits(std::span<const int> tokens, Attention attention) const {
    const std::size_t T = tokens.size();
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const auto V = static_cast<std::size_t>(cfg_.vocab_size);
    const auto f = static_cast<std::size_t>(cfg_.d_ff);
    const auto H = static_cast<std::size_t>(cfg_.n_heads);
    const std::size_t dh = d / H;
    if (T == 0) throw ValueError("empty input sequence");
    if (T > static_cast<std::size_t>(cfg_.max_seq)) {
      throw ValueError("sequence length " + std::to_string(T) + " exceeds max_seq " +
                       std::to_string(cfg_.max_seq));
    }
    for (int t : tokens) {
      if (t < 0 || t >= cfg_.vocab_size) throw ValueError("token id " + std::to_string(t) + " out of range");
    }

    std::vector<double> x(T * d);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < d; ++i)
        x[t * d + i] = tok_[static_cast<std::size_t>(tokens[t]) * d + i] + pos_[t * d + i];

    std::vector<double> h(T * d), q(T * d), k(T * d), v(T * d), att(T * d), tmp(d), ff(f);
    std::vector<double> scores(T);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (const Layer& L : layers_) {
      for (std::size_t t = 0; t < T; ++t) {
        auto xt = std::span<const double>(x).subspan(t * d, d);
        auto ht = std::span<double>(h).subspan(t * d, d);
        detail::layer_norm(xt, L.ln1_g, L.ln1_b, ht);
        detail::matvec(L.wq, d, d, ht, std::span<double>(q).subspan(t * d, d));
        detail::matvec(L.wk, d, d, ht, std::span<double>(k).subspan(t * d, d));
        detail::matvec(L.wv, d, d, ht, std::span<double>(v).subspan(t * d, d));
      }
      for (std::size_t hd = 0; hd < H; ++hd) {
        const std::size_t off = hd * dh;
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t visible = attention == Attention::Causal ? t + 1 : T;
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t s = 0; s < visible; ++s) {
            double dot = 0.0;
            for (std::size_t i = 0; i < dh; ++i) dot += q[t * d + off + i] * k[s * d + off + i];
            scores[s] = dot * scale;
            mx = std::max(mx, scores[s]);
          }
          double denom = 0.0;
          for (std::size_t s = 0; s < visible; ++s) {
            scores[s] = std::exp(scores[s] - mx);
            denom += scores[s];
          }
          for (std::size_t i = 0; i < dh; ++i) {
            double acc = 0.0;
            for (std::size_t s = 0; s < visible; ++s) acc += scores[s] * v[s * d + off + i];
            att[t * d + off + i] = acc / denom;
          }
        }
      }
      for (std::size_t t = 0; t < T; ++t) {
        detail::matvec(L.wo, d, d, std::span<const double>(att).subspan(t * d, d), tmp);
        for (std::size_t i = 0; i < d; ++i) x[t * d + i] += tmp[i];
      }
      for (std::size_t t = 0; t < T; ++t) {
        auto xt = std::span<double>(x).subspan(t * d, d);
        detail::layer_norm(xt, L.ln2_g, L.ln2_b, tmp);
        detail::matvec(L.w1, f, d, tmp, ff);
        for (double& a : ff) a = detail::gelu(a);
        detail::matvec(L.w2, d, f, ff, tmp);
        for (std::size_t i = 0; i < d; ++i) xt[i] += tmp[i];
      }
    }
    std::vector<double> out(T * V);
    for (std::size_t t = 0; t < T; ++t) {
      detail::layer_norm(std::span<const double>(x).subspan(t * d, d), final_g_, final_b_, tmp);
      detail::matvec(head_, V, d, tmp, std::span<double>(out).subspan(t * V, V));
    }
    return out;
  }

 private:
  struct Layer {
    std::vector<double> wq, wk, wv, wo, w1, w2, ln1_g, ln1_b, ln2_g, ln2_b;
  };

  ModelConfig cfg_;
  std::vector<double> tok_, pos_, final_g_, final_b_, head_;
  std::vector<Layer> layers_;
};

// ---------------------------------------------------------------------------
// Likelihoods

/// Sum over the response of log p(response_j | prompt, response_<j) under
/// causal attention. An empty prompt is preceded by the PAD id so the first
/// response token has a position to be predicted from.
inline double ar_log_likelihood(const Model& model, const Tokens& prompt, const Tokens& response) {
  if (response.empty()) throw ValueError("response must be non-empty");
  const auto& cfg = model.config();
  if (prompt.size() + response.size() > static_cast<std::size_t>(cfg.max_seq)) {
    throw ValueError("prompt + response length exceeds max_seq");
  }
  Tokens input;
  if (prompt.empty()) input.push_back(cfg.pad_id());
  input.insert(input.end(), prompt.begin(), prompt.end());
  input.insert(input.end(), response.begin(), response.end() - 1);
  for (int t : response) {
    if (t < 0 || t >= cfg.vocab_size) throw ValueError("token id " + std::to_string(t) + " out of range");
  }
  const auto logits = model.logits(input, Attention::Causal);
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  const std::size_t first = input.size() - response.size();
  double total = 0.0;
  for (std::size_t j = 0; j < response.size(); ++j) {
    const auto row = std::span<const double>(logits).subspan((first + j) * V, V);
    total += log_softmax(row)[static_cast<std::size_t>(response[j])];
  }
  return total;
}

/// A response with some positions corrupted to the MASK id.
struct MaskedSeq {
  Tokens tokens;
  std::vector<bool> mask_flags;
  double t = 1.0;

  std::size_t masked_count() const {
    return static_cast<std::size_t>(std::count(mask_flags.begin(), mask_flags.end(), true));
  }
};

/// Mask count for a response of `length` at timestep t: max(1, round(t * length)).
inline std::size_t mask_count(double t, std::size_t length) {
  const auto m = static_cast<std::size_t>(std::llround(t * static_cast<double>(length)));
  return std::clamp<std::size_t>(m, 1, length);
}

inline constexpr std::uint64_t kCorruptStream = 0xC0441u;
inline constexpr std::uint64_t kTimestepStream = 0x71E5u;

/// Forward corruption: masks mask_count(t, L) positions chosen uniformly
/// without replacement (the m smallest of L keyed uniforms).
inline MaskedSeq corrupt(const Tokens& response, double t, std::uint64_t seed, int mask_id) {
  if (response.empty()) throw ValueError("response must be non-empty");
  if (!(t > 0.0 && t <= 1.0)) throw ValueError("timestep t must lie in (0, 1]");
  const std::size_t L = response.size();
  const std::size_t m = mask_count(t, L);
  const rng::Stream stream(seed, kCorruptStream);
  std::vector<std::pair<double, std::size_t>> keys(L);
  for (std::size_t i = 0; i < L; ++i) keys[i] = {stream.uniform(i), i};
  std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(m), keys.end());
  MaskedSeq ms{response, std::vector<bool>(L, false), t};
  for (std::size_t j = 0; j < m; ++j) {
    ms.mask_flags[keys[j].second] = true;
    ms.tokens[keys[j].second] = mask_id;
  }
  return ms;
}

/// Sum over masked positions j of log p(original_j | prompt, corrupted
/// response) with bidirectional attention. Masked slots are fed as MASK
/// regardless of what ms.tokens holds there.
inline double masked_log_prob(const Model& model, const Tokens& prompt, const MaskedSeq& ms,
                              const Tokens& original) {
  const auto& cfg = model.config();
  const std::size_t L = original.size();
  if (ms.tokens.size() != L || ms.mask_flags.size() != L) {
    throw ValueError("masked sequence and original response differ in length");
  }
  if (ms.masked_count() == 0) throw ValueError("no masked positions");
  if (prompt.size() + L > static_cast<std::size_t>(cfg.max_seq)) {
    throw ValueError("prompt + response length exceeds max_seq");
  }
  Tokens input(prompt);
  for (std::size_t j = 0; j < L; ++j) input.push_back(ms.mask_flags[j] ? cfg.mask_id() : ms.tokens[j]);
  for (int t : original) {
    if (t < 0 || t >= cfg.vocab_size) throw ValueError("token id " + std::to_string(t) + " out of range");
  }
  const auto logits = model.logits(input, Attention::Bidirectional);
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  double total = 0.0;
  for (std::size_t j = 0; j < L; ++j) {
    if (!ms.mask_flags[j]) continue;
    const auto row = std::span<const double>(logits).subspan((prompt.size() + j) * V, V);
    total += log_softmax(row)[static_cast<std::size_t>(original[j])];
  }
  return total;
}

// ---------------------------------------------------------------------------
// ELBO

/// Doubly Monte-Carlo budget: n_t timesteps, n_yt masks per timestep.
struct ElboConfig {
  int n_t = 4;
  int n_yt = 1;
  bool antithetic = true;
  std::uint64_t seed = 0;

  int budget() const { return n_t * n_yt; }

  void validate() const {
    if (n_t < 1 || n_yt < 1) throw ValueError("n_t and n_yt must be positive");
  }
};

/// Timestep of draw j. With antithetic sampling, draws 2q and 2q+1 use
/// (t, 1 - t); 1 - t is clamped into (0, 1].
inline double draw_timestep(const ElboConfig& cfg, int j) {
  const rng::Stream stream(cfg.seed, kTimestepStream);
  if (!cfg.antithetic) return 1.0 - stream.uniform(static_cast<std::uint64_t>(j));
  const double u = stream.uniform(static_cast<std::uint64_t>(j / 2));
  if (j % 2 == 0) return 1.0 - u;
  return std::max(u, std::numeric_limits<double>::min());
}

/// Every corruption an estimate with this config evaluates, in order. The
/// list depends only on (response, cfg), never on the model, so two models
/// scored against the same list see identical corruptions.
inline std::vector<MaskedSeq> corruption_draws(const Tokens& response, const ElboConfig& cfg, int mask_id) {
  cfg.validate();
  std::vector<MaskedSeq> out;
  out.reserve(static_cast<std::size_t>(cfg.budget()));
  for (int j = 0; j < cfg.n_t; ++j) {
    const double t = draw_timestep(cfg, j);
    for (int k = 0; k < cfg.n_yt; ++k) {
      const auto index = static_cast<std::uint64_t>(j) * static_cast<std::uint64_t>(cfg.n_yt) +
                         static_cast<std::uint64_t>(k);
      out.push_back(corrupt(response, t, rng::derive_seed(cfg.seed, index), mask_id));
    }
  }
  return out;
}

/// Per-draw ELBO term: (L / m) * sum of masked log-probabilities.
inline double elbo_term(const Model& model, const Tokens& prompt, const MaskedSeq& ms, const Tokens& response) {
  const double L = static_cast<double>(response.size());
  const double m = static_cast<double>(ms.masked_count());
  return (L / m) * masked_log_prob(model, prompt, ms, response);
}

/// Running mean; returns x exactly when every sample equals x.
class RunningMean {
 public:
  void add(double x) {
    ++n_;
    mean_ += (x - mean_) / static_cast<double>(n_);
  }
  double value() const { return mean_; }

 private:
  double mean_ = 0.0;
  std::size_t n_ = 0;
};

/// Monte-Carlo ELBO: the mean of elbo_term over corruption_draws.
inline double elbo_estimate(const Model& model, const Tokens& prompt, const Tokens& response,
                            const ElboConfig& cfg) {
  if (response.empty()) throw ValueError("response must be non-empty");
  RunningMean mean;
  for (const auto& ms : corruption_draws(response, cfg, model.config().mask_id())) {
    mean.add(elbo_term(model, prompt, ms, response));
  }
  return mean.value();
}

/// Byte-level convenience tokenizer: byte value = token id.
inline Tokens byte_tokens(std::string_view text) {
  Tokens out;
  out.reserve(text.size());
  for (char c : text) out.push_back(static_cast<unsigned char>(c));
  return out;
}

}  // namespace armap::lm
