#pragma once

// Implicit reward under the masked-diffusion likelihood, batch reward
// accuracy, the coarse-then-fine scaling-factor search, and forward-only
// preference-loss diagnostics (DPO, ELBO-DPO, SimPO).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "armap/checkpoint.hpp"
#include "armap/error.hpp"
#include "armap/parallel.hpp"
#include "armap/philox.hpp"
#include "armap/task_vector.hpp"
#include "armap/tiny_lm.hpp"

namespace armap::reward {

using lm::ElboConfig;
using lm::Model;
using lm::Tokens;

struct PreferencePair {
  Tokens prompt;
  Tokens chosen;
  Tokens rejected;
  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

inline constexpr std::size_t kDefaultBatchCap = 4096;

struct PreferenceBatch {
  std::vector<PreferencePair> pairs;
  std::string id;
};

enum class TiePolicy { CountAsFailure };
enum class ReferencePolicy { BaseDllm };

struct RewardConfig {
  ElboConfig elbo;
  TiePolicy tie_policy = TiePolicy::CountAsFailure;
  ReferencePolicy reference = ReferencePolicy::BaseDllm;
  unsigned threads = 1;
};

// ---------------------------------------------------------------------------
// Preference batch files (JSON Lines)

struct BatchReadOptions {
  bool byte_tokens = false;
  std::size_t cap = kDefaultBatchCap;
};

namespace detail {

inline Tokens read_tokens(const nlohmann::json& obj, const std::string& key, bool byte_tokens,
                          std::size_t line) {
  const std::string where = "line " + std::to_string(line) + ": ";
  if (obj.contains(key)) {
    const auto& a = obj[key];
    if (!a.is_array()) throw FormatError(where + "'" + key + "' must be an array of integers");
    Tokens out;
    for (const auto& v : a) {
      if (!v.is_number_integer()) throw FormatError(where + "'" + key + "' must be an array of integers");
      const auto x = v.get<std::int64_t>();
      if (x < 0 || x > std::numeric_limits<int>::max()) throw FormatError(where + "negative or huge token id");
      out.push_back(static_cast<int>(x));
    }
    return out;
  }
  const std::string text_key = "text_" + key;
  if (byte_tokens && obj.contains(text_key)) {
    if (!obj[text_key].is_string()) throw FormatError(where + "'" + text_key + "' must be a string");
    return lm::byte_tokens(obj[text_key].get<std::string>());
  }
  throw FormatError(where + "missing '" + key + "'");
}

}  // namespace detail

/// Parses one pair per non-blank line. Keeps at most opts.cap pairs.
inline PreferenceBatch parse_preference_jsonl(std::string_view text, const BatchReadOptions& opts = {},
                                              std::string id = "batch") {
  PreferenceBatch batch;
  batch.id = std::move(id);
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size() && batch.pairs.size() < opts.cap) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("line " + std::to_string(line_no) + ": invalid JSON: " + e.what());
    }
    if (!obj.is_object()) throw FormatError("line " + std::to_string(line_no) + ": expected a JSON object");
    PreferencePair p;
    p.prompt = detail::read_tokens(obj, "prompt", opts.byte_tokens, line_no);
    p.chosen = detail::read_tokens(obj, "chosen", opts.byte_tokens, line_no);
    p.rejected = detail::read_tokens(obj, "rejected", opts.byte_tokens, line_no);
    if (p.chosen.empty() || p.rejected.empty()) {
      throw FormatError("line " + std::to_string(line_no) + ": chosen and rejected must be non-empty");
    }
    batch.pairs.push_back(std::move(p));
  }
  return batch;
}

inline PreferenceBatch load_preference_jsonl(const std::filesystem::path& path, const BatchReadOptions& opts = {}) {
  return parse_preference_jsonl(read_file(path), opts, path.stem().string());
}

inline std::string to_jsonl(const PreferenceBatch& batch) {
  std::string out;
  for (const auto& p : batch.pairs) {
    nlohmann::ordered_json j{{"prompt", p.prompt}, {"chosen", p.chosen}, {"rejected", p.rejected}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

/// Every id must be a valid token and every sequence must fit the context.
inline void validate_batch(const PreferenceBatch& batch, const lm::ModelConfig& cfg) {
  if (batch.pairs.empty()) throw ValueError("preference batch is empty");
  auto check = [&](const Tokens& ts, std::size_t i, const char* what) {
    for (int t : ts) {
      if (t < 0 || t >= cfg.vocab_size) {
        throw FormatError("pair " + std::to_string(i) + ": " + what + " token id " + std::to_string(t) +
                          " outside vocabulary of " + std::to_string(cfg.vocab_size));
      }
    }
  };
  for (std::size_t i = 0; i < batch.pairs.size(); ++i) {
    const auto& p = batch.pairs[i];
    check(p.prompt, i, "prompt");
    check(p.chosen, i, "chosen");
    check(p.rejected, i, "rejected");
    const auto longest = std::max(p.chosen.size(), p.rejected.size());
    if (p.prompt.size() + longest > static_cast<std::size_t>(cfg.max_seq)) {
      throw FormatError("pair " + std::to_string(i) + ": prompt + response exceeds max_seq");
    }
  }
}

// ---------------------------------------------------------------------------
// Implicit reward

/// Mean over the configured corruption draws of
///   masked_log_prob(policy) - masked_log_prob(reference),
/// with both models scored on the same corruptions.
inline double implicit_reward(const Model& policy, const Model& reference, const Tokens& prompt,
                              const Tokens& response, const RewardConfig& cfg) {
  if (response.empty()) throw ValueError("response must be non-empty");
  if (!(policy.config() == reference.config())) {
    throw ShapeError("policy and reference use different model configs", CompatReport{false, {}, {}, {}});
  }
  lm::RunningMean mean;
  for (const auto& ms : lm::corruption_draws(response, cfg.elbo, policy.config().mask_id())) {
    mean.add(lm::masked_log_prob(policy, prompt, ms, response) -
             lm::masked_log_prob(reference, prompt, ms, response));
  }
  return mean.value();
}

/// Corruption seed for one side of one pair. Identical for every model the
/// batch is scored against.
inline std::uint64_t pair_seed(std::uint64_t master, std::size_t pair_index, int side) {
  return rng::derive_seed(master, 2 * static_cast<std::uint64_t>(pair_index) + static_cast<std::uint64_t>(side));
}

struct PairRewards {
  double chosen = 0.0;
  double rejected = 0.0;
};

/// Implicit rewards of both responses of every pair, in batch order.
inline std::vector<PairRewards> batch_rewards(const Model& policy, const Model& reference,
                                              const PreferenceBatch& batch, const RewardConfig& cfg) {
  if (batch.pairs.empty()) throw ValueError("preference batch is empty");
  std::vector<PairRewards> out(batch.pairs.size());
  parallel_for(batch.pairs.size(), cfg.threads, [&](std::size_t i) {
    const auto& p = batch.pairs[i];
    RewardConfig side = cfg;
    side.elbo.seed = pair_seed(cfg.elbo.seed, i, 0);
    out[i].chosen = implicit_reward(policy, reference, p.prompt, p.chosen, side);
    side.elbo.seed = pair_seed(cfg.elbo.seed, i, 1);
    out[i].rejected = implicit_reward(policy, reference, p.prompt, p.rejected, side);
  });
  return out;
}

/// Fraction of pairs whose chosen reward strictly exceeds the rejected one.
inline double batch_reward_accuracy(const Model& policy, const Model& reference, const PreferenceBatch& batch,
                                    const RewardConfig& cfg) {
  const auto rewards = batch_rewards(policy, reference, batch, cfg);
  std::size_t wins = 0;
  for (const auto& r : rewards) wins += r.chosen > r.rejected ? 1 : 0;
  return static_cast<double>(wins) / static_cast<double>(rewards.size());
}

// ---------------------------------------------------------------------------
// Scaling-factor search

enum class StopReason { AccuracyDrop, GammaCap };

inline std::string stop_reason_name(StopReason r) {
  return r == StopReason::AccuracyDrop ? "accuracy_drop" : "gamma_cap";
}

inline constexpr int kDefaultGammaCap = 15;

struct SearchPoint {
  double gamma;
  double accuracy;
  friend bool operator==(const SearchPoint&, const SearchPoint&) = default;
};

struct SearchTrace {
  std::vector<SearchPoint> visited;
  double gamma_hat = 0.0;
  StopReason stopped_reason = StopReason::AccuracyDrop;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["visited"] = nlohmann::ordered_json::array();
    for (const auto& v : visited) j["visited"].push_back({{"gamma", v.gamma}, {"accuracy", v.accuracy}});
    j["gamma_hat"] = gamma_hat;
    j["stopped_reason"] = stop_reason_name(stopped_reason);
    return j;
  }
};

/// Coarse pass over gamma = 1, 3, 5, ... that stops at the first accuracy
/// strictly below the best so far (or once gamma would pass gamma_cap),
/// then one check at (last coarse gamma - 1). gamma_hat is the argmax over
/// everything visited; the earliest visit wins exact ties.
inline SearchTrace search_gamma(const std::function<double(double)>& accuracy_at, int gamma_cap) {
  if (gamma_cap < 1) throw ValueError("gamma_cap must be >= 1");
  SearchTrace trace;
  double best = 0.0;
  int gamma = 1;
  int last = 1;
  while (true) {
    if (gamma > gamma_cap) {
      trace.stopped_reason = StopReason::GammaCap;
      break;
    }
    const double acc = accuracy_at(gamma);
    trace.visited.push_back({static_cast<double>(gamma), acc});
    last = gamma;
    if (acc < best) {
      trace.stopped_reason = StopReason::AccuracyDrop;
      break;
    }
    best = acc;
    gamma += 2;
  }
  const double fine = static_cast<double>(last - 1);
  trace.visited.push_back({fine, accuracy_at(fine)});

  trace.gamma_hat = trace.visited.front().gamma;
  double best_acc = trace.visited.front().accuracy;
  for (const auto& v : trace.visited) {
    if (v.accuracy > best_acc) {
      best_acc = v.accuracy;
      trace.gamma_hat = v.gamma;
    }
  }
  return trace;
}

/// Search against real checkpoints: each candidate is base + gamma * tau,
/// scored against the unmerged base with the same corruption seeds.
inline SearchTrace search_gamma(const Checkpoint& base_dllm, const lm::ModelConfig& config,
                                const TaskVector& tau_pref, const PreferenceBatch& batch,
                                const RewardConfig& cfg, int gamma_cap) {
  if (gamma_cap < 1) throw ValueError("gamma_cap must be >= 1");
  if (batch.pairs.empty()) throw ValueError("preference batch is empty");
  require_compatible(base_dllm, tau_pref.delta);
  const Model reference(config, base_dllm);
  return search_gamma(
      [&](double gamma) {
        const Model policy(config, apply(base_dllm, tau_pref, gamma));
        return batch_reward_accuracy(policy, reference, batch, cfg);
      },
      gamma_cap);
}

// ---------------------------------------------------------------------------
// Loss diagnostics (values only)

/// -log(sigmoid(z)), stable for large |z|.
inline double neg_log_sigmoid(double z) {
  return z > 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

namespace detail {

inline void require_mode(const Model& m, lm::Mode mode, const char* loss) {
  if (m.config().mode != mode) {
    throw ModeError(std::string(loss) + " needs a " + lm::mode_name(mode) + " model, got " +
                    lm::mode_name(m.config().mode));
  }
}

}  // namespace detail

/// -log sigmoid(beta * [(log pi(y_w) - log ref(y_w)) - (log pi(y_l) - log ref(y_l))])
/// with exact autoregressive likelihoods.
inline double dpo_loss_value(const Model& policy, const Model& reference, const PreferencePair& pair, double beta) {
  detail::require_mode(policy, lm::Mode::AR, "DPO loss");
  detail::require_mode(reference, lm::Mode::AR, "DPO loss");
  const double dw = lm::ar_log_likelihood(policy, pair.prompt, pair.chosen) -
                    lm::ar_log_likelihood(reference, pair.prompt, pair.chosen);
  const double dl = lm::ar_log_likelihood(policy, pair.prompt, pair.rejected) -
                    lm::ar_log_likelihood(reference, pair.prompt, pair.rejected);
  return neg_log_sigmoid(beta * (dw - dl));
}

/// DPO with each log-likelihood replaced by its ELBO estimate, in the
/// difference form beta * (B_pi(y_w) - B_ref(y_w)) - beta * (B_pi(y_l) - B_ref(y_l)).
/// Policy and reference share corruption seeds per response.
inline double elbo_dpo_loss_value(const Model& policy, const Model& reference, const PreferencePair& pair,
                                  double beta, const ElboConfig& cfg) {
  detail::require_mode(policy, lm::Mode::Diffusion, "ELBO-DPO loss");
  detail::require_mode(reference, lm::Mode::Diffusion, "ELBO-DPO loss");
  ElboConfig w = cfg, l = cfg;
  w.seed = rng::derive_seed(cfg.seed, 0);
  l.seed = rng::derive_seed(cfg.seed, 1);
  const double dw = lm::elbo_estimate(policy, pair.prompt, pair.chosen, w) -
                    lm::elbo_estimate(reference, pair.prompt, pair.chosen, w);
  const double dl = lm::elbo_estimate(policy, pair.prompt, pair.rejected, l) -
                    lm::elbo_estimate(reference, pair.prompt, pair.rejected, l);
  return neg_log_sigmoid(beta * dw - beta * dl);
}

inline constexpr double kSimpoBeta = 2.5;
inline constexpr double kSimpoMargin = 1.5;

/// Reference-free, length-normalized:
/// -log sigmoid(beta/|y_w| log pi(y_w) - beta/|y_l| log pi(y_l) - margin).
inline double simpo_loss_value(const Model& policy, const PreferencePair& pair, double beta = kSimpoBeta,
                               double margin = kSimpoMargin) {
  detail::require_mode(policy, lm::Mode::AR, "SimPO loss");
  const double rw = beta / static_cast<double>(pair.chosen.size()) *
                    lm::ar_log_likelihood(policy, pair.prompt, pair.chosen);
  const double rl = beta / static_cast<double>(pair.rejected.size()) *
                    lm::ar_log_likelihood(policy, pair.prompt, pair.rejected);
  return neg_log_sigmoid(rw - rl - margin);
}

}  // namespace armap::reward
