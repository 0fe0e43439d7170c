#pragma once

// Command-line front end. Every subcommand maps its flags onto one library
// operation; run() returns the process exit code:
//   0 success, 1 internal error, 2 compatibility/shape error, 3 input error.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "armap/armap.hpp"

namespace armap::cli {

enum ExitCode : int { kOk = 0, kInternal = 1, kIncompatible = 2, kBadInput = 3 };

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct Common {
  std::uint64_t seed = 0;
  unsigned threads = default_threads();
  bool csv = false;
  bool json_out = true;
};

inline Checkpoint::Metadata provenance(const std::string& command) {
  return {{"armap.version", kToolkitVersion}, {"armap.command", command}};
}

inline Checkpoint stamped(Checkpoint c, const std::string& command) {
  for (auto& [k, v] : provenance(command)) c.metadata()[k] = v;
  return c;
}

inline void add_common(CLI::App* sub, Common& common, bool tabular) {
  sub->add_option("--seed", common.seed, "Master random seed")->capture_default_str();
  sub->add_option("--threads", common.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  if (tabular) {
    auto* j = sub->add_flag("--json", common.json_out, "Emit JSON (default)");
    auto* c = sub->add_flag("--csv", common.csv, "Emit CSV, one row per tensor");
    j->excludes(c);
  }
}

inline lm::ModelConfig config_for(const std::optional<std::string>& explicit_path, const fs::path& beside) {
  const fs::path p = explicit_path ? fs::path(*explicit_path) : beside.parent_path() / "config.json";
  return lm::load_config(p);
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"armap: transfer preference task vectors into diffusion checkpoints"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  Common common;

  // inspect
  std::string inspect_path;
  bool allow_non_finite = false;
  auto* inspect = app.add_subcommand("inspect", "List tensors and metadata of a checkpoint");
  inspect->add_option("checkpoint", inspect_path, "Checkpoint file")->required();
  inspect->add_flag("--allow-non-finite", allow_non_finite, "Accept NaN/Inf values");
  add_common(inspect, common, true);

  // diff
  std::string diff_target, diff_base, diff_out;
  auto* diff_cmd = app.add_subcommand("diff", "Task vector target - base");
  diff_cmd->add_option("--target", diff_target, "Fine-tuned checkpoint")->required();
  diff_cmd->add_option("--base", diff_base, "Base checkpoint")->required();
  diff_cmd->add_option("--out", diff_out, "Output task-vector file")->required();
  add_common(diff_cmd, common, false);

  // merge
  std::string merge_base, merge_out;
  std::vector<std::string> merge_tvs;
  std::vector<double> merge_gammas;
  auto* merge = app.add_subcommand("merge", "base + sum_i gamma_i * tau_i");
  merge->add_option("--base", merge_base, "Base checkpoint")->required();
  merge->add_option("--tv", merge_tvs, "Task-vector file (repeatable)")->required();
  merge->add_option("--gamma", merge_gammas, "Coefficient per task vector (default 1)");
  merge->add_option("--out", merge_out, "Output checkpoint")->required();
  add_common(merge, common, false);

  // ties
  std::string ties_base, ties_out;
  std::vector<std::string> ties_tvs;
  double ties_retain = 0.1, ties_lambda = 1.0, ties_gamma = 1.0;
  auto* ties = app.add_subcommand("ties", "TIES-merge preference vectors, then apply with gamma");
  ties->add_option("--base", ties_base, "Checkpoint receiving the merged vector")->required();
  ties->add_option("--tv", ties_tvs, "Preference task-vector file (repeatable)")->required();
  ties->add_option("--retain", ties_retain, "Fraction kept per tensor, in (0, 1]")->capture_default_str();
  ties->add_option("--lambda", ties_lambda, "Scale of the merged vector")->capture_default_str();
  ties->add_option("--gamma", ties_gamma, "Scale applied onto the base")->capture_default_str();
  ties->add_option("--out", ties_out, "Output checkpoint")->required();
  add_common(ties, common, false);

  // dare
  std::string dare_base, dare_tv, dare_out;
  double dare_p = 0.0, dare_gamma = 1.0;
  auto* dare_cmd = app.add_subcommand("dare", "Drop-and-rescale a preference vector, then apply with gamma");
  dare_cmd->add_option("--base", dare_base, "Checkpoint receiving the vector")->required();
  dare_cmd->add_option("--tv", dare_tv, "Preference task-vector file")->required();
  dare_cmd->add_option("--p", dare_p, "Drop probability, in [0, 1)")->required();
  dare_cmd->add_option("--gamma", dare_gamma, "Scale applied onto the base")->capture_default_str();
  dare_cmd->add_option("--out", dare_out, "Output checkpoint")->required();
  add_common(dare_cmd, common, false);

  // svd
  std::string svd_tv;
  std::size_t top_k = spectral::kDefaultTopK;
  auto* svd = app.add_subcommand("svd", "Layer-wise singular spectra of a task vector");
  svd->add_option("--tv", svd_tv, "Task-vector file")->required();
  svd->add_option("--top-k", top_k, "Singular values kept per tensor")->capture_default_str()->check(CLI::PositiveNumber);
  add_common(svd, common, true);

  // shadow
  std::string shadow_diff, shadow_pref;
  double shadow_gamma = 1.0;
  auto* shadow = app.add_subcommand("shadow", "Spectral-shadowing report for tau_diff + gamma * tau_pref");
  shadow->add_option("--tau-diff", shadow_diff, "Diffusion task-vector file")->required();
  shadow->add_option("--tau-pref", shadow_pref, "Preference task-vector file")->required();
  shadow->add_option("--gamma", shadow_gamma, "Scale on tau_pref")->capture_default_str();
  add_common(shadow, common, true);

  // reward-acc / search share the reward flags.
  int n_t = 4, n_yt = 1;
  bool no_antithetic = false, byte_tokens = false;
  std::size_t batch_cap = reward::kDefaultBatchCap;
  std::optional<std::string> config_path;
  auto add_reward_flags = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Model config JSON (default: config.json beside the base)");
    sub->add_option("--n-t", n_t, "Timestep draws per response")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--n-yt", n_yt, "Masks per timestep")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_flag("--no-antithetic", no_antithetic, "Disable (t, 1-t) timestep pairing");
    sub->add_option("--batch-cap", batch_cap, "Maximum pairs read from the batch")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_flag("--byte-tokens", byte_tokens, "Accept text_* fields, one token per byte");
  };

  std::string racc_policy, racc_reference, racc_batch;
  auto* racc = app.add_subcommand("reward-acc", "Batch reward accuracy of a policy against a reference");
  racc->add_option("--policy", racc_policy, "Policy checkpoint")->required();
  racc->add_option("--reference", racc_reference, "Reference checkpoint")->required();
  racc->add_option("--batch", racc_batch, "Preference pairs, JSON Lines")->required();
  add_reward_flags(racc);
  add_common(racc, common, false);

  std::string search_base, search_tau, search_batch;
  std::optional<std::string> save_merged;
  int gamma_cap = reward::kDefaultGammaCap;
  auto* search = app.add_subcommand("search", "Reward-accuracy search for the scaling factor gamma");
  search->add_option("--base", search_base, "Diffusion checkpoint")->required();
  search->add_option("--tau-pref", search_tau, "Preference task-vector file")->required();
  search->add_option("--batch", search_batch, "Preference pairs, JSON Lines")->required();
  search->add_option("--gamma-cap", gamma_cap, "Largest coarse gamma")->capture_default_str()->check(CLI::PositiveNumber);
  search->add_option("--save-merged", save_merged, "Write base + gamma_hat * tau_pref here");
  add_reward_flags(search);
  add_common(search, common, false);

  // init-model / gen-synthetic share the architecture flags.
  lm::ModelConfig arch;
  std::string mode_flag = "AR";
  auto add_arch_flags = [&](CLI::App* sub) {
    sub->add_option("--vocab", arch.vocab_size, "Vocabulary size incl. PAD and MASK")->capture_default_str();
    sub->add_option("--d-model", arch.d_model, "Hidden width")->capture_default_str();
    sub->add_option("--layers", arch.n_layers, "Transformer blocks")->capture_default_str();
    sub->add_option("--heads", arch.n_heads, "Attention heads")->capture_default_str();
    sub->add_option("--d-ff", arch.d_ff, "MLP width")->capture_default_str();
    sub->add_option("--max-seq", arch.max_seq, "Context length")->capture_default_str();
  };

  std::string init_out;
  std::optional<std::string> init_config;
  auto* init = app.add_subcommand("init-model", "Deterministically initialize a model and its config.json");
  add_arch_flags(init);
  init->add_option("--mode", mode_flag, "AR or DIFFUSION")->capture_default_str()->check(CLI::IsMember({"AR", "DIFFUSION"}));
  init->add_option("--config", init_config, "Read the architecture from this config JSON instead");
  init->add_option("--out", init_out, "Output checkpoint")->required();
  add_common(init, common, false);

  synthetic::SyntheticOptions syn;
  std::string syn_dir;
  auto* gen = app.add_subcommand("gen-synthetic", "Write the end-to-end synthetic fixture");
  add_arch_flags(gen);
  gen->add_option("--pairs", syn.pairs, "Preference pairs")->capture_default_str();
  gen->add_option("--prompt-len", syn.prompt_len, "Prompt tokens per pair")->capture_default_str();
  gen->add_option("--response-len", syn.response_len, "Response tokens")->capture_default_str();
  gen->add_option("--preferred", syn.preferred_tokens, "Number of preferred tokens")->capture_default_str();
  gen->add_option("--pref-norm", syn.pref_norm, "Spectral norm of the preference head delta")->capture_default_str();
  gen->add_option("--head-bias", syn.head_bias, "Final-norm bias shift in the preference delta")->capture_default_str();
  gen->add_option("--diffusion-ratio", syn.diffusion_ratio, "Diffusion-to-preference norm ratio")->capture_default_str();
  gen->add_option("--out-dir", syn_dir, "Output directory")->required();
  add_common(gen, common, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help on any level is reported through the same exception path.
    return app.exit(e, out, err) == 0 ? kOk : kBadInput;
  }

  auto emit = [&](const json& j) { out << j.dump(2) << "\n"; };

  try {
    if (inspect->parsed()) {
      const auto ckpt = load_checkpoint(inspect_path, {allow_non_finite});
      if (common.csv) {
        out << "name,dtype,shape,numel,l2_norm\n";
        for (const auto& [name, t] : ckpt) {
          double s = 0.0;
          for (float v : t.values) s += static_cast<double>(v) * v;
          out << name << ",F32," << shape_string(t.shape) << ',' << t.numel() << ',' << format_real(std::sqrt(s)) << '\n';
        }
        return kOk;
      }
      json j;
      j["metadata"] = ckpt.metadata();
      j["tensors"] = json::array();
      for (const auto& [name, t] : ckpt) {
        double s = 0.0;
        for (float v : t.values) s += static_cast<double>(v) * v;
        j["tensors"].push_back({{"name", name}, {"dtype", "F32"}, {"shape", t.shape}, {"numel", t.numel()},
                                {"l2_norm", std::sqrt(s)}});
      }
      emit(j);
      return kOk;
    }

    if (diff_cmd->parsed()) {
      const auto target = load_checkpoint(diff_target);
      const auto base = load_checkpoint(diff_base);
      const auto tv = diff(target, base, diff_target, diff_base);
      save_checkpoint(stamped(tv.to_checkpoint(), "diff"), diff_out);
      emit({{"out", diff_out}, {"tensors", tv.delta.size()}});
      return kOk;
    }

    if (merge->parsed()) {
      if (merge_gammas.empty()) merge_gammas.assign(merge_tvs.size(), 1.0);
      if (merge_gammas.size() != merge_tvs.size()) {
        throw ValueError("give one --gamma per --tv (" + std::to_string(merge_tvs.size()) + " task vectors, " +
                         std::to_string(merge_gammas.size()) + " coefficients)");
      }
      for (double g : merge_gammas) {
        if (!std::isfinite(g)) throw ValueError("--gamma must be finite");
      }
      const auto base = load_checkpoint(merge_base);
      std::vector<TaskVector> tvs;
      for (const auto& p : merge_tvs) tvs.push_back(load_task_vector(p));
      MergePlan plan{&base, {}};
      for (std::size_t i = 0; i < tvs.size(); ++i) plan.terms.push_back({&tvs[i], merge_gammas[i]});
      Checkpoint merged = tvs.size() == 1 ? apply(base, tvs[0], merge_gammas[0]) : linear_merge(plan);
      save_checkpoint(stamped(std::move(merged), "merge"), merge_out);
      emit({{"out", merge_out}, {"terms", tvs.size()}});
      return kOk;
    }

    if (ties->parsed()) {
      if (!(ties_retain > 0.0 && ties_retain <= 1.0)) throw ValueError("--retain must lie in (0, 1]");
      if (!std::isfinite(ties_lambda) || !std::isfinite(ties_gamma)) throw ValueError("--lambda and --gamma must be finite");
      const auto base = load_checkpoint(ties_base);
      std::vector<TaskVector> tvs;
      for (const auto& p : ties_tvs) tvs.push_back(load_task_vector(p));
      const auto merged_tv = ties_merge(tvs, ties_retain, ties_lambda);
      auto merged = apply(base, merged_tv, ties_gamma);
      merged.metadata()["armap.ties.retain"] = format_real(ties_retain);
      merged.metadata()["armap.ties.lambda"] = format_real(ties_lambda);
      merged.metadata()["armap.ties.granularity"] = "per-tensor";
      save_checkpoint(stamped(std::move(merged), "ties"), ties_out);
      emit({{"out", ties_out}, {"task_vectors", tvs.size()}});
      return kOk;
    }

    if (dare_cmd->parsed()) {
      if (!(dare_p >= 0.0 && dare_p < 1.0)) throw ValueError("--p must lie in [0, 1)");
      if (!std::isfinite(dare_gamma)) throw ValueError("--gamma must be finite");
      const auto base = load_checkpoint(dare_base);
      const auto tv = load_task_vector(dare_tv);
      auto merged = apply(base, dare(tv, dare_p, common.seed), dare_gamma);
      merged.metadata()["armap.dare.p"] = format_real(dare_p);
      merged.metadata()["armap.dare.seed"] = std::to_string(common.seed);
      save_checkpoint(stamped(std::move(merged), "dare"), dare_out);
      emit({{"out", dare_out}});
      return kOk;
    }

    if (svd->parsed()) {
      const auto report = spectral::layer_report(load_task_vector(svd_tv), top_k);
      if (common.csv) {
        out << report.to_csv();
      } else {
        emit(report.to_json());
      }
      return kOk;
    }

    if (shadow->parsed()) {
      if (!(shadow_gamma >= 0.0) || !std::isfinite(shadow_gamma)) throw ValueError("--gamma must be finite and >= 0");
      const auto report =
          spectral::shadowing_report(load_task_vector(shadow_diff), load_task_vector(shadow_pref), shadow_gamma);
      if (common.csv) {
        out << report.to_csv();
      } else {
        emit(report.to_json());
      }
      return kOk;
    }

    reward::RewardConfig rcfg;
    rcfg.elbo.n_t = n_t;
    rcfg.elbo.n_yt = n_yt;
    rcfg.elbo.antithetic = !no_antithetic;
    rcfg.elbo.seed = common.seed;
    rcfg.threads = common.threads;

    if (racc->parsed()) {
      const auto cfg = config_for(config_path, racc_reference);
      const auto batch = reward::load_preference_jsonl(racc_batch, {byte_tokens, batch_cap});
      reward::validate_batch(batch, cfg);
      const lm::Model policy(cfg, load_checkpoint(racc_policy));
      const lm::Model reference(cfg, load_checkpoint(racc_reference));
      const double acc = reward::batch_reward_accuracy(policy, reference, batch, rcfg);
      emit({{"batch", batch.id}, {"pairs", batch.pairs.size()}, {"accuracy", acc}});
      return kOk;
    }

    if (search->parsed()) {
      const auto cfg = config_for(config_path, search_base);
      const auto batch = reward::load_preference_jsonl(search_batch, {byte_tokens, batch_cap});
      reward::validate_batch(batch, cfg);
      const auto base = load_checkpoint(search_base);
      const auto tau = load_task_vector(search_tau);
      const auto trace = reward::search_gamma(base, cfg, tau, batch, rcfg, gamma_cap);
      if (save_merged) {
        save_checkpoint(stamped(apply(base, tau, trace.gamma_hat), "search"), *save_merged);
      }
      emit(trace.to_json());
      return kOk;
    }

    if (init->parsed()) {
      lm::ModelConfig cfg = arch;
      if (init_config) {
        cfg = lm::load_config(*init_config);
      } else {
        cfg.mode = mode_flag == "AR" ? lm::Mode::AR : lm::Mode::Diffusion;
      }
      cfg.validate();
      const auto weights = lm::init_model(cfg, common.seed);
      auto tagged = stamped(weights, "init-model");
      tagged.metadata()["armap.seed"] = std::to_string(common.seed);
      save_checkpoint(tagged, init_out);
      lm::save_config(cfg, fs::path(init_out).parent_path() / "config.json");
      emit({{"out", init_out}, {"tensors", weights.size()}});
      return kOk;
    }

    if (gen->parsed()) {
      syn.config = arch;
      syn.seed = common.seed;
      syn.validate();
      const auto fx = synthetic::make_synthetic(syn);
      synthetic::write_synthetic(fx, syn_dir, provenance("gen-synthetic"));
      emit(fx.manifest);
      return kOk;
    }
  } catch (const ShapeError& e) {
    err << e.report().to_json().dump(2) << "\n";
    err << "error: " << e.what() << "\n";
    return kIncompatible;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kBadInput;
  } catch (const IntegrityError& e) {
    err << "error: " << e.what() << "\n";
    return kBadInput;
  } catch (const DtypeError& e) {
    err << "error: " << e.what() << "\n";
    return kBadInput;
  } catch (const ValueError& e) {
    err << "error: " << e.what() << "\n";
    return kBadInput;
  } catch (const ModeError& e) {
    err << "error: " << e.what() << "\n";
    return kBadInput;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kBadInput;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  err << "error: no subcommand\n";
  return kBadInput;
}

/// Convenience overload for tests: argv[0] is supplied.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"armap"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace armap::cli
