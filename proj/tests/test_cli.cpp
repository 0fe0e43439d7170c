#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "armap_cli.hpp"

using namespace armap;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("armap_cli_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  // Small fixture shared by the reward commands.
  void synthetic() {
    const auto r = run({"gen-synthetic", "--out-dir", path("fx"), "--vocab", "16", "--d-model", "8", "--layers", "1",
                        "--heads", "2", "--d-ff", "16", "--max-seq", "8", "--pairs", "10", "--prompt-len", "2",
                        "--response-len", "2", "--preferred", "3", "--seed", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
  }

  fs::path dir_;
};

void write(const std::string& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

Checkpoint small(std::uint64_t seed, std::size_t cols = 3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd;
  Checkpoint c;
  for (const char* name : {"a", "b"}) {
    std::vector<float> v(2 * cols);
    for (auto& x : v) x = 1.0f + 0.25f * nd(rng);
    c.add(name, {2, cols}, std::move(v));
  }
  return c;
}

}  // namespace

TEST_F(CliTest, HelpEverywhere) {
  EXPECT_EQ(run({"--help"}).code, 0);
  for (const char* sub : {"inspect", "diff", "merge", "ties", "dare", "svd", "shadow", "reward-acc", "search",
                          "init-model", "gen-synthetic"}) {
    const auto r = run({sub, "--help"});
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("--seed"), std::string::npos) << sub;
    EXPECT_NE(r.out.find("--threads"), std::string::npos) << sub;
  }
  const auto search = run({"search", "--help"}).out;
  for (const char* flag : {"--gamma-cap INT:POSITIVE [15]", "--n-t INT:POSITIVE [4]", "--batch-cap", "[4096]",
                           "--save-merged"}) {
    EXPECT_NE(search.find(flag), std::string::npos) << flag;
  }
  EXPECT_NE(run({"svd", "--help"}).out.find("[64]"), std::string::npos);
  EXPECT_NE(run({"svd", "--help"}).out.find("--csv"), std::string::npos);
}

TEST_F(CliTest, ParseErrorsExitThree) {
  EXPECT_EQ(run({}).code, 3);
  EXPECT_EQ(run({"bogus"}).code, 3);
  EXPECT_EQ(run({"diff", "--target", "x"}).code, 3);
  EXPECT_EQ(run({"svd", "--tv", "x", "--json", "--csv"}).code, 3);
}

TEST_F(CliTest, MissingInputExitsThree) {
  const auto r = run({"inspect", path("nope.safetensors")});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("cannot open"), std::string::npos);
}

TEST_F(CliTest, CorruptInputExitsThree) {
  write(path("bad.safetensors"), "garbage!garbage");
  EXPECT_EQ(run({"inspect", path("bad.safetensors")}).code, 3);
}

TEST_F(CliTest, InspectJsonAndCsv) {
  save_checkpoint(small(1), path("a.safetensors"));
  const auto j = run({"inspect", path("a.safetensors")});
  ASSERT_EQ(j.code, 0);
  const auto parsed = nlohmann::json::parse(j.out);
  EXPECT_EQ(parsed["tensors"].size(), 2u);
  EXPECT_EQ(parsed["tensors"][0]["shape"], nlohmann::json::parse("[2,3]"));
  const auto c = run({"inspect", path("a.safetensors"), "--csv"});
  EXPECT_EQ(c.out.substr(0, c.out.find('\n')), "name,dtype,shape,numel,l2_norm");
}

TEST_F(CliTest, DiffIdenticalGivesZero) {
  save_checkpoint(small(1), path("a.safetensors"));
  ASSERT_EQ(run({"diff", "--target", path("a.safetensors"), "--base", path("a.safetensors"), "--out", path("t.st")}).code,
            0);
  const auto tv = load_task_vector(path("t.st"));
  for (const auto& [_, t] : tv.delta)
    for (float v : t.values) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(load_checkpoint(path("t.st")).metadata().at("armap.command"), "diff");
}

TEST_F(CliTest, ShapeMismatchExitsTwoWithoutOutput) {
  save_checkpoint(small(1, 3), path("a.safetensors"));
  save_checkpoint(small(2, 4), path("b.safetensors"));
  const auto r = run({"diff", "--target", path("a.safetensors"), "--base", path("b.safetensors"), "--out", path("t.st")});
  EXPECT_EQ(r.code, 2);
  const auto report = nlohmann::json::parse(r.err.substr(0, r.err.find("\nerror:")));
  EXPECT_EQ(report["compatible"], false);
  EXPECT_EQ(report["shape_mismatches"].size(), 2u);
  EXPECT_FALSE(fs::exists(path("t.st")));
  EXPECT_FALSE(fs::exists(path("t.st.tmp")));
}

TEST_F(CliTest, DiffThenMergeReproducesTarget) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto base = small(seed);
    Checkpoint target;
    std::mt19937_64 rng(seed + 100);
    std::uniform_real_distribution<float> ud(-0.5f, 0.5f);
    for (const auto& [name, t] : base) {
      std::vector<float> v = t.values;
      for (auto& x : v) x *= 1.0f + ud(rng);
      target.add(name, t.shape, std::move(v));
    }
    save_checkpoint(base, path("base.st"));
    save_checkpoint(target, path("target.st"));
    ASSERT_EQ(run({"diff", "--target", path("target.st"), "--base", path("base.st"), "--out", path("tv.st")}).code, 0);
    ASSERT_EQ(run({"merge", "--base", path("base.st"), "--tv", path("tv.st"), "--gamma", "1", "--out", path("m.st")}).code,
              0);
    const auto merged = load_checkpoint(path("m.st"));
    for (const auto& [name, t] : target) {
      const auto& got = merged.at(name).values;
      ASSERT_EQ(got.size(), t.values.size());
      for (std::size_t i = 0; i < got.size(); ++i) {
        const float lo = std::nextafter(t.values[i], -INFINITY), hi = std::nextafter(t.values[i], INFINITY);
        EXPECT_TRUE(got[i] >= lo && got[i] <= hi) << name << "[" << i << "]";
      }
    }
  }
}

TEST_F(CliTest, MergeValidatesBeforeWriting) {
  save_checkpoint(small(1), path("base.st"));
  save_checkpoint(small(2), path("tv.st"));
  EXPECT_EQ(run({"merge", "--base", path("base.st"), "--tv", path("tv.st"), "--gamma", "1", "--gamma", "2", "--out",
                 path("m.st")})
                .code,
            3);
  EXPECT_EQ(run({"ties", "--base", path("base.st"), "--tv", path("tv.st"), "--retain", "0", "--out", path("m.st")}).code,
            3);
  EXPECT_EQ(run({"dare", "--base", path("base.st"), "--tv", path("tv.st"), "--p", "1", "--out", path("m.st")}).code, 3);
  EXPECT_FALSE(fs::exists(path("m.st")));
}

TEST_F(CliTest, TiesAndDareWriteMetadata) {
  save_checkpoint(small(1), path("base.st"));
  save_checkpoint(small(2), path("tv1.st"));
  save_checkpoint(small(3), path("tv2.st"));
  ASSERT_EQ(run({"ties", "--base", path("base.st"), "--tv", path("tv1.st"), "--tv", path("tv2.st"), "--retain", "0.5",
                 "--gamma", "2", "--out", path("t.st")})
                .code,
            0);
  const auto t = load_checkpoint(path("t.st"));
  EXPECT_EQ(t.metadata().at("armap.ties.granularity"), "per-tensor");
  EXPECT_EQ(t.metadata().at("armap.gamma"), "2");
  ASSERT_EQ(run({"dare", "--base", path("base.st"), "--tv", path("tv1.st"), "--p", "0.5", "--seed", "9", "--out",
                 path("d.st")})
                .code,
            0);
  EXPECT_EQ(load_checkpoint(path("d.st")).metadata().at("armap.dare.seed"), "9");
}

TEST_F(CliTest, InitModelWritesConfig) {
  const auto r = run({"init-model", "--out", path("m.st"), "--mode", "DIFFUSION", "--vocab", "8", "--d-model", "4",
                      "--heads", "2", "--layers", "1", "--d-ff", "8", "--max-seq", "6", "--seed", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto cfg = lm::load_config(path("config.json"));
  EXPECT_EQ(cfg.mode, lm::Mode::Diffusion);
  EXPECT_EQ(cfg.vocab_size, 8);
  const auto m = load_checkpoint(path("m.st"));
  EXPECT_NO_THROW(lm::Model(cfg, m));
  EXPECT_EQ(run({"init-model", "--out", path("x.st"), "--heads", "3"}).code, 3);
}

TEST_F(CliTest, SyntheticPipeline) {
  synthetic();
  const auto manifest = nlohmann::json::parse(read_file(path("fx/manifest.json")));
  EXPECT_LT(manifest["global_epsilon"].get<double>(), 0.1);
  for (const char* f : {"w_ar.safetensors", "w_ar_aligned.safetensors", "w_dllm.safetensors", "tau_pref.safetensors",
                        "config.json", "config_ar.json", "preferences.jsonl"}) {
    EXPECT_TRUE(fs::exists(path(std::string("fx/") + f))) << f;
  }

  ASSERT_EQ(run({"diff", "--target", path("fx/w_dllm.safetensors"), "--base", path("fx/w_ar.safetensors"), "--out",
                 path("fx/tau_diff.safetensors")})
                .code,
            0);
  const auto shadow = run({"shadow", "--tau-diff", path("fx/tau_diff.safetensors"), "--tau-pref",
                           path("fx/tau_pref.safetensors"), "--gamma", "4"});
  ASSERT_EQ(shadow.code, 0) << shadow.err;
  const auto sj = nlohmann::json::parse(shadow.out);
  EXPECT_EQ(sj["all_bounds_hold"], true);
  const auto csv = run({"shadow", "--tau-diff", path("fx/tau_diff.safetensors"), "--tau-pref",
                        path("fx/tau_pref.safetensors"), "--csv"});
  EXPECT_EQ(csv.out.rfind("name,norm_diff", 0), 0u);
  const auto svd = run({"svd", "--tv", path("fx/tau_diff.safetensors"), "--top-k", "3"});
  ASSERT_EQ(svd.code, 0);
  EXPECT_EQ(nlohmann::json::parse(svd.out)["entries"][0]["singular_values"].size(), 3u);

  const std::vector<std::string> search{"search", "--base", path("fx/w_dllm.safetensors"), "--tau-pref",
                                        path("fx/tau_pref.safetensors"), "--batch", path("fx/preferences.jsonl"),
                                        "--gamma-cap", "5", "--save-merged", path("fx/merged.safetensors")};
  const auto a = run(search);
  ASSERT_EQ(a.code, 0) << a.err;
  const auto b = run(search);
  EXPECT_EQ(a.out, b.out);
  const auto trace = nlohmann::json::parse(a.out);
  EXPECT_TRUE(trace.contains("visited") && trace.contains("gamma_hat") && trace.contains("stopped_reason"));
  const auto merged = load_checkpoint(path("fx/merged.safetensors"));
  EXPECT_EQ(merged.metadata().at("armap.gamma"), format_real(trace["gamma_hat"].get<double>()));

  const auto acc0 = run({"reward-acc", "--policy", path("fx/w_dllm.safetensors"), "--reference",
                         path("fx/w_dllm.safetensors"), "--batch", path("fx/preferences.jsonl")});
  ASSERT_EQ(acc0.code, 0) << acc0.err;
  EXPECT_EQ(nlohmann::json::parse(acc0.out)["accuracy"], 0.0);
}

TEST_F(CliTest, SearchInputErrors) {
  synthetic();
  write(path("fx/empty.jsonl"), "");
  const std::vector<std::string> base{"search", "--base", path("fx/w_dllm.safetensors"), "--tau-pref",
                                      path("fx/tau_pref.safetensors"), "--batch"};
  auto with = [&](const std::string& batch) {
    auto args = base;
    args.push_back(batch);
    return run(args);
  };
  EXPECT_EQ(with(path("fx/empty.jsonl")).code, 3);

  write(path("fx/bad.jsonl"), "{\"prompt\":[1],\"chosen\":[2],\"rejected\":[3]}\n{\"prompt\": oops}\n");
  const auto bad = with(path("fx/bad.jsonl"));
  EXPECT_EQ(bad.code, 3);
  EXPECT_NE(bad.err.find("line 2"), std::string::npos) << bad.err;

  write(path("fx/range.jsonl"), "{\"prompt\":[1],\"chosen\":[99],\"rejected\":[3]}\n");
  EXPECT_EQ(with(path("fx/range.jsonl")).code, 3);

  // A task vector from a different architecture.
  Checkpoint other;
  other.add("w", {1}, {0.0f});
  save_checkpoint(other, path("fx/other.st"));
  const auto mismatch = run({"search", "--base", path("fx/w_dllm.safetensors"), "--tau-pref", path("fx/other.st"),
                             "--batch", path("fx/preferences.jsonl")});
  EXPECT_EQ(mismatch.code, 2);
}

TEST_F(CliTest, RerunsAreByteIdentical) {
  synthetic();
  const auto first = read_file(path("fx/w_dllm.safetensors"));
  const auto manifest = read_file(path("fx/manifest.json"));
  synthetic();
  EXPECT_EQ(read_file(path("fx/w_dllm.safetensors")), first);
  EXPECT_EQ(read_file(path("fx/manifest.json")), manifest);

  save_checkpoint(small(1), path("base.st"));
  save_checkpoint(small(2), path("tv.st"));
  for (const char* out : {"d1.st", "d2.st"}) {
    ASSERT_EQ(run({"dare", "--base", path("base.st"), "--tv", path("tv.st"), "--p", "0.3", "--seed", "4", "--out",
                   path(out)})
                  .code,
              0);
  }
  EXPECT_EQ(read_file(path("d1.st")), read_file(path("d2.st")));
}
