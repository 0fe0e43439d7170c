#pragma once

// Synthetic end-to-end fixture: an AR base model, a preference-aligned copy
// whose delta is small and rank-1 in the output head, a diffusion copy whose
// delta is large and dense, and preference pairs that favour the boosted
// tokens.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "armap/checkpoint.hpp"
#include "armap/philox.hpp"
#include "armap/reward.hpp"
#include "armap/spectral.hpp"
#include "armap/task_vector.hpp"
#include "armap/tiny_lm.hpp"

namespace armap::synthetic {

struct SyntheticOptions {
  lm::ModelConfig config;  // mode is ignored; AR and diffusion copies are emitted
  std::uint64_t seed = 0;
  std::size_t pairs = 64;
  std::size_t prompt_len = 4;
  std::size_t response_len = 4;
  std::size_t preferred_tokens = 4;
  double pref_norm = 0.02;       // spectral norm of the head delta in tau_pref
  double head_bias = 1.0;        // size of the final-norm bias shift in tau_pref
  double diffusion_ratio = 50.0; // per-matrix spectral norm of tau_diffusion / pref_norm

  void validate() const {
    config.validate();
    const auto content = static_cast<std::size_t>(config.vocab_size - 2);
    if (preferred_tokens < 1 || preferred_tokens >= content) {
      throw ValueError("preferred_tokens must leave at least one ordinary token");
    }
    if (pairs < 1) throw ValueError("pairs must be >= 1");
    if (response_len < 1) throw ValueError("response_len must be >= 1");
    if (prompt_len + response_len > static_cast<std::size_t>(config.max_seq)) {
      throw ValueError("prompt_len + response_len exceeds max_seq");
    }
    if (!(pref_norm > 0.0) || !(diffusion_ratio > 0.0) || !std::isfinite(head_bias)) {
      throw ValueError("pref_norm and diffusion_ratio must be positive");
    }
  }
};

struct SyntheticFixture {
  lm::ModelConfig ar_config;
  lm::ModelConfig dllm_config;
  Checkpoint w_ar;
  Checkpoint w_ar_aligned;
  Checkpoint w_dllm;
  TaskVector tau_pref;
  TaskVector tau_diffusion;
  reward::PreferenceBatch batch;
  std::vector<int> preferred;
  nlohmann::ordered_json manifest;
};

namespace detail {

// Sub-stream identifiers under the fixture seed.
enum : std::uint64_t { kTokens = 1, kDirection = 2, kDiffusion = 3, kPairs = 4 };

inline std::vector<int> sample_tokens(const rng::Stream& s, std::uint64_t& counter, const std::vector<int>& pool,
                                      std::size_t n) {
  std::vector<int> out(n);
  for (auto& t : out) {
    const auto idx = static_cast<std::size_t>(s.uniform(counter++) * static_cast<double>(pool.size()));
    t = pool[std::min(idx, pool.size() - 1)];
  }
  return out;
}

}  // namespace detail

inline SyntheticFixture make_synthetic(const SyntheticOptions& opts) {
  opts.validate();
  SyntheticFixture fx;
  fx.ar_config = opts.config;
  fx.ar_config.mode = lm::Mode::AR;
  fx.dllm_config = opts.config;
  fx.dllm_config.mode = lm::Mode::Diffusion;
  const auto d = static_cast<std::size_t>(opts.config.d_model);

  fx.w_ar = lm::init_model(fx.ar_config, opts.seed);

  // Preferred tokens: a keyed shuffle of the ordinary (non-reserved) ids.
  const int content = opts.config.vocab_size - 2;
  std::vector<int> ids(static_cast<std::size_t>(content));
  std::iota(ids.begin(), ids.end(), 0);
  const rng::Stream token_stream(rng::derive_seed(opts.seed, detail::kTokens), 0);
  std::vector<std::pair<double, int>> keyed;
  for (int id : ids) keyed.push_back({token_stream.uniform(static_cast<std::uint64_t>(id)), id});
  std::sort(keyed.begin(), keyed.end());
  std::vector<int> others;
  for (std::size_t i = 0; i < keyed.size(); ++i) {
    (i < opts.preferred_tokens ? fx.preferred : others).push_back(keyed[i].second);
  }
  std::sort(fx.preferred.begin(), fx.preferred.end());
  std::sort(others.begin(), others.end());

  // tau_pref: rank-1 boost of the preferred head rows along u, plus a shift
  // of the final-norm bias along the same u.
  const rng::Stream dir_stream(rng::derive_seed(opts.seed, detail::kDirection), 0);
  std::vector<double> u(d);
  for (std::size_t i = 0; i < d; ++i) u[i] = dir_stream.normal(i);
  const double un = std::sqrt(std::inner_product(u.begin(), u.end(), u.begin(), 0.0));
  for (double& x : u) x /= un;
  const double row_scale = opts.pref_norm / std::sqrt(static_cast<double>(fx.preferred.size()));

  fx.w_ar_aligned = fx.w_ar;
  {
    auto head = fx.w_ar_aligned.values("lm_head");
    for (int tok : fx.preferred) {
      for (std::size_t i = 0; i < d; ++i) head[static_cast<std::size_t>(tok) * d + i] += static_cast<float>(row_scale * u[i]);
    }
    auto bias = fx.w_ar_aligned.values("final_ln.b");
    for (std::size_t i = 0; i < d; ++i) bias[i] += static_cast<float>(opts.head_bias * u[i]);
  }

  // tau_diffusion: a dense Gaussian matrix per 2-D tensor, rescaled to the
  // target spectral norm.
  const double diff_norm = opts.diffusion_ratio * opts.pref_norm;
  fx.w_dllm = fx.w_ar;
  for (const auto& [name, t] : fx.w_ar) {
    if (t.rank() != 2) continue;
    const rng::Stream s(rng::derive_seed(opts.seed, detail::kDiffusion), rng::fnv1a(name));
    spectral::Matrix g(t.shape[0], t.shape[1]);
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = s.normal(i);
    const double scale = diff_norm / spectral::spectral_norm(g);
    auto w = fx.w_dllm.values(name);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(w[i] + scale * g.data[i]);
  }

  // Deltas as realized in 32-bit storage.
  fx.tau_pref = diff(fx.w_ar_aligned, fx.w_ar, "w_ar_aligned", "w_ar");
  fx.tau_diffusion = diff(fx.w_dllm, fx.w_ar, "w_dllm", "w_ar");

  const rng::Stream pair_stream(rng::derive_seed(opts.seed, detail::kPairs), 0);
  std::uint64_t counter = 0;
  fx.batch.id = "synthetic";
  for (std::size_t i = 0; i < opts.pairs; ++i) {
    reward::PreferencePair p;
    p.prompt = detail::sample_tokens(pair_stream, counter, others, opts.prompt_len);
    p.chosen = detail::sample_tokens(pair_stream, counter, fx.preferred, opts.response_len);
    p.rejected = detail::sample_tokens(pair_stream, counter, others, opts.response_len);
    fx.batch.pairs.push_back(std::move(p));
  }

  const auto shadow = spectral::shadowing_report(fx.tau_diffusion, fx.tau_pref, 1.0);
  fx.manifest["seed"] = opts.seed;
  fx.manifest["config"] = opts.config.to_json();
  fx.manifest["pairs"] = opts.pairs;
  fx.manifest["prompt_len"] = opts.prompt_len;
  fx.manifest["response_len"] = opts.response_len;
  fx.manifest["preferred_tokens"] = fx.preferred;
  fx.manifest["pref_norm"] = opts.pref_norm;
  fx.manifest["head_bias"] = opts.head_bias;
  fx.manifest["diffusion_ratio"] = opts.diffusion_ratio;
  fx.manifest["diffusion_norm"] = diff_norm;
  fx.manifest["global_epsilon"] = shadow.global_epsilon;
  fx.manifest["streams"] = {{"tokens", rng::derive_seed(opts.seed, detail::kTokens)},
                            {"direction", rng::derive_seed(opts.seed, detail::kDirection)},
                            {"diffusion", rng::derive_seed(opts.seed, detail::kDiffusion)},
                            {"pairs", rng::derive_seed(opts.seed, detail::kPairs)}};
  fx.manifest["files"] = {{"w_ar", "w_ar.safetensors"},
                          {"w_ar_aligned", "w_ar_aligned.safetensors"},
                          {"w_dllm", "w_dllm.safetensors"},
                          {"tau_pref", "tau_pref.safetensors"},
                          {"config_ar", "config_ar.json"},
                          {"config", "config.json"},
                          {"preferences", "preferences.jsonl"}};
  return fx;
}

/// Writes the fixture files named in the manifest into out_dir.
inline void write_synthetic(const SyntheticFixture& fx, const std::filesystem::path& out_dir,
                            const Checkpoint::Metadata& extra_metadata = {}) {
  std::filesystem::create_directories(out_dir);
  auto tagged = [&](Checkpoint c) {
    for (const auto& [k, v] : extra_metadata) c.metadata()[k] = v;
    return c;
  };
  save_checkpoint(tagged(fx.w_ar), out_dir / "w_ar.safetensors");
  save_checkpoint(tagged(fx.w_ar_aligned), out_dir / "w_ar_aligned.safetensors");
  save_checkpoint(tagged(fx.w_dllm), out_dir / "w_dllm.safetensors");
  save_checkpoint(tagged(fx.tau_pref.to_checkpoint()), out_dir / "tau_pref.safetensors");
  lm::save_config(fx.ar_config, out_dir / "config_ar.json");
  lm::save_config(fx.dllm_config, out_dir / "config.json");
  write_file_atomic(out_dir / "preferences.jsonl", reward::to_jsonl(fx.batch));
  write_file_atomic(out_dir / "manifest.json", fx.manifest.dump(2) + "\n");
}

}  // namespace armap::synthetic
