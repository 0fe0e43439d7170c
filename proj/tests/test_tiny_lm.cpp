#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "armap/tiny_lm.hpp"
#include "oracles.hpp"

using namespace armap;
using namespace armap::lm;

namespace {

ModelConfig small_config(Mode mode = Mode::Diffusion) {
  ModelConfig c;
  c.vocab_size = 12;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq = 12;
  c.mode = mode;
  return c;
}

// Random weights large enough that every layer shapes the output.
Checkpoint random_weights(const ModelConfig& c, std::uint64_t seed, float scale = 0.5f) {
  Checkpoint w = init_model(c, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, scale);
  for (const auto& [name, shape] : weight_layout(c)) {
    for (auto& x : w.values(name)) x = shape.size() == 2 ? nd(rng) : x + 0.3f * nd(rng);
  }
  return w;
}

Checkpoint uniform_weights(const ModelConfig& c) {
  Checkpoint w = random_weights(c, 1);
  for (auto& x : w.values("lm_head")) x = 0.0f;
  return w;
}

}  // namespace

TEST(Config, ValidationAndJson) {
  ModelConfig c = small_config();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.mask_id(), 11);
  EXPECT_EQ(c.pad_id(), 10);
  EXPECT_EQ(ModelConfig::from_json(nlohmann::json::parse(c.to_json().dump())), c);
  EXPECT_EQ(c.to_json()["mode"], "DIFFUSION");

  auto bad = c;
  bad.n_heads = 3;
  EXPECT_THROW(bad.validate(), ValueError);
  bad = c;
  bad.vocab_size = 3;
  EXPECT_THROW(bad.validate(), ValueError);
  bad = c;
  bad.max_seq = 1;
  EXPECT_THROW(bad.validate(), ValueError);
  EXPECT_THROW(ModelConfig::from_json(nlohmann::json::parse(R"({"vocab_size": 8})")), FormatError);
}

TEST(Init, DeterministicNamingAndShapes) {
  ModelConfig c = small_config();
  const auto a = init_model(c, 3), b = init_model(c, 3), d = init_model(c, 4);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, d);
  EXPECT_TRUE(validate_compatible(a, d).compatible);

  std::set<std::string> groups;
  for (const auto& [name, _] : a) {
    if (name.rfind("layers.", 0) == 0) groups.insert(name.substr(0, name.find('.', 7)));
  }
  EXPECT_EQ(groups, (std::set<std::string>{"layers.0", "layers.1"}));
  for (const char* n : {"embed.tok", "embed.pos", "final_ln.g", "final_ln.b", "lm_head", "layers.1.attn.wq",
                        "layers.1.attn.wk", "layers.1.attn.wv", "layers.1.attn.wo", "layers.1.mlp.w1",
                        "layers.1.mlp.w2", "layers.1.ln1.g", "layers.1.ln1.b", "layers.1.ln2.g", "layers.1.ln2.b"}) {
    EXPECT_TRUE(a.contains(n)) << n;
  }
  EXPECT_EQ(a.at("layers.0.mlp.w1").shape, (Shape{16, 8}));
  for (float g : a.at("final_ln.g").values) EXPECT_EQ(g, 1.0f);
  for (float b2 : a.at("layers.0.ln2.b").values) EXPECT_EQ(b2, 0.0f);
}

TEST(Model, RejectsMismatchedWeights) {
  ModelConfig c = small_config();
  auto w = init_model(c, 0);
  ModelConfig other = c;
  other.d_ff = 32;
  EXPECT_THROW(Model(other, w), ShapeError);
}

TEST(Model, SoftmaxNormalized) {
  ModelConfig c = small_config();
  const Model m(c, random_weights(c, 2));
  const Tokens toks{1, 5, 3, 11, 0, 7};
  for (auto att : {Attention::Causal, Attention::Bidirectional}) {
    const auto logits = m.logits(toks, att);
    for (std::size_t t = 0; t < toks.size(); ++t) {
      const auto lp = log_softmax(std::span<const double>(logits).subspan(t * 12, 12));
      double s = 0.0;
      for (double x : lp) s += std::exp(x);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Model, MatchesNaiveForward) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ModelConfig c = small_config();
    const auto w = random_weights(c, 10 + seed);
    const Model m(c, w);
    const Tokens toks{2, 9, 0, 11, 4};
    for (bool causal : {true, false}) {
      const auto mine = m.logits(toks, causal ? Attention::Causal : Attention::Bidirectional);
      const auto ref = oracle::forward(c, w, toks, causal);
      for (std::size_t t = 0; t < toks.size(); ++t)
        for (std::size_t v = 0; v < 12; ++v) EXPECT_NEAR(mine[t * 12 + v], ref[t][v], 1e-10);
    }
  }
}

TEST(Model, TwoTokenVocabularyHandSet) {
  // Vocab 4 leaves two ordinary tokens {0, 1} beside PAD and MASK.
  ModelConfig c{4, 2, 1, 1, 2, 4, Mode::AR};
  Checkpoint w = init_model(c, 0);
  auto set = [&](const char* name, std::vector<float> v) {
    auto s = w.values(name);
    std::copy(v.begin(), v.end(), s.begin());
  };
  set("embed.tok", {1, -1, -1, 1, 0.5f, 0.5f, 0, 2});
  set("embed.pos", {0.1f, 0, 0, 0.2f, -0.3f, 0, 0, 0});
  set("layers.0.attn.wq", {1, 0, 0, 1});
  set("layers.0.attn.wk", {0.5f, 0.5f, -0.5f, 0.5f});
  set("layers.0.attn.wv", {1, 2, 0, 1});
  set("layers.0.attn.wo", {0.5f, 0, 0, 0.5f});
  set("layers.0.mlp.w1", {1, -1, 2, 0});
  set("layers.0.mlp.w2", {0.3f, 0.1f, -0.2f, 0.4f});
  set("lm_head", {2, 0, 0, 2, -1, 1, 1, -1});
  const Model m(c, w);
  for (const auto& [p, r] : std::vector<std::pair<Tokens, Tokens>>{{{0}, {1, 0}}, {{}, {1, 1, 0}}, {{1, 0}, {0}}}) {
    EXPECT_NEAR(ar_log_likelihood(m, p, r), oracle::ar_log_likelihood(c, w, p, r), 1e-12);
  }
}

TEST(ArLikelihood, UniformModel) {
  ModelConfig c = small_config(Mode::AR);
  const Model m(c, uniform_weights(c));
  for (std::size_t L = 1; L <= 6; ++L) {
    const Tokens resp(L, 3);
    EXPECT_NEAR(ar_log_likelihood(m, {1, 2}, resp), -static_cast<double>(L) * std::log(12.0), 1e-12);
  }
}

TEST(ArLikelihood, MatchesOracleAndNonPositive) {
  ModelConfig c = small_config(Mode::AR);
  std::mt19937_64 rng(4);
  for (int i = 0; i < 10; ++i) {
    const auto w = random_weights(c, 20 + i);
    const Model m(c, w);
    Tokens prompt(rng() % 4), resp(1 + rng() % 5);
    for (auto& t : prompt) t = static_cast<int>(rng() % 10);
    for (auto& t : resp) t = static_cast<int>(rng() % 10);
    const double ll = ar_log_likelihood(m, prompt, resp);
    EXPECT_LE(ll, 0.0);
    EXPECT_NEAR(ll, oracle::ar_log_likelihood(c, w, prompt, resp), 1e-10);
  }
}

TEST(ArLikelihood, Causality) {
  ModelConfig c = small_config(Mode::AR);
  const Model m(c, random_weights(c, 5));
  const Tokens a{1, 2, 3, 4, 5, 6}, b{1, 2, 3, 9, 0, 8};
  const auto la = m.logits(a, Attention::Causal), lb = m.logits(b, Attention::Causal);
  for (std::size_t i = 0; i < 3 * 12; ++i) EXPECT_EQ(la[i], lb[i]);
  bool later_differs = false;
  for (std::size_t i = 3 * 12; i < la.size(); ++i) later_differs |= la[i] != lb[i];
  EXPECT_TRUE(later_differs);
}

TEST(ArLikelihood, Errors) {
  ModelConfig c = small_config(Mode::AR);
  const Model m(c, init_model(c, 0));
  EXPECT_THROW(ar_log_likelihood(m, {1}, {}), ValueError);
  EXPECT_THROW(ar_log_likelihood(m, Tokens(8, 1), Tokens(5, 1)), ValueError);
  EXPECT_THROW(ar_log_likelihood(m, {1}, {12}), ValueError);
  EXPECT_THROW(ar_log_likelihood(m, {-1}, {1}), ValueError);
}

TEST(Corrupt, CountRules) {
  EXPECT_EQ(mask_count(0.5, 10), 5u);
  EXPECT_EQ(mask_count(1.0, 7), 7u);
  EXPECT_EQ(mask_count(1e-9, 7), 1u);
  EXPECT_EQ(mask_count(0.25, 2), 1u);   // round half away from zero
  EXPECT_EQ(mask_count(0.75, 2), 2u);

  const Tokens r{1, 2, 3, 4, 5, 6, 7, 8, 9, 0};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto full = corrupt(r, 1.0, seed, 11);
    EXPECT_EQ(full.masked_count(), 10u);
    EXPECT_EQ(full.tokens, Tokens(10, 11));
    const auto half = corrupt(r, 0.5, seed, 11);
    EXPECT_EQ(half.masked_count(), 5u);
    for (std::size_t j = 0; j < r.size(); ++j) EXPECT_EQ(half.tokens[j], half.mask_flags[j] ? 11 : r[j]);
    EXPECT_EQ(corrupt(r, 0.5, seed, 11).mask_flags, half.mask_flags);
  }
  EXPECT_THROW(corrupt({}, 0.5, 0, 11), ValueError);
  EXPECT_THROW(corrupt(r, 0.0, 0, 11), ValueError);
  EXPECT_THROW(corrupt(r, 1.5, 0, 11), ValueError);
}

TEST(Corrupt, PositionsUniform) {
  // Each position of a length-4 response is masked with probability 1/2 at
  // t = 0.5.
  const Tokens r{1, 2, 3, 4};
  std::vector<int> hits(4, 0);
  const int n = 8000;
  for (int s = 0; s < n; ++s) {
    const auto ms = corrupt(r, 0.5, static_cast<std::uint64_t>(s), 11);
    for (std::size_t j = 0; j < 4; ++j) hits[j] += ms.mask_flags[j];
  }
  for (int h : hits) EXPECT_NEAR(h / static_cast<double>(n), 0.5, 4.0 * std::sqrt(0.25 / n));
}

TEST(MaskedLogProb, UniformModel) {
  ModelConfig c = small_config();
  const Model m(c, uniform_weights(c));
  const Tokens r{1, 2, 3, 4, 5};
  for (double t : {0.2, 0.5, 1.0}) {
    const auto ms = corrupt(r, t, 3, c.mask_id());
    EXPECT_NEAR(masked_log_prob(m, {7}, ms, r), -static_cast<double>(ms.masked_count()) * std::log(12.0), 1e-12);
  }
}

TEST(MaskedLogProb, MatchesOracleAndIgnoresMaskedContent) {
  ModelConfig c = small_config();
  const auto w = random_weights(c, 6);
  const Model m(c, w);
  const Tokens r{4, 0, 9, 2};
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    auto ms = corrupt(r, 0.5, seed, c.mask_id());
    const double lp = masked_log_prob(m, {1, 3}, ms, r);
    EXPECT_LE(lp, 0.0);
    EXPECT_NEAR(lp, oracle::masked_log_prob(c, w, {1, 3}, ms.mask_flags, r), 1e-10);
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (ms.mask_flags[j]) ms.tokens[j] = static_cast<int>((j + seed) % 10);
    }
    EXPECT_EQ(masked_log_prob(m, {1, 3}, ms, r), lp);
  }
}

TEST(MaskedLogProb, SingleTokenFullMask) {
  ModelConfig c = small_config();
  const auto w = random_weights(c, 7);
  const Model m(c, w);
  const auto ms = corrupt({5}, 1.0, 0, c.mask_id());
  const auto logits = oracle::forward(c, w, {2, 8, c.mask_id()}, false);
  EXPECT_NEAR(masked_log_prob(m, {2, 8}, ms, {5}), oracle::log_prob(logits[2], 5), 1e-10);
}

TEST(MaskedLogProb, Errors) {
  ModelConfig c = small_config();
  const Model m(c, init_model(c, 0));
  MaskedSeq none{{1, 2}, {false, false}, 1.0};
  EXPECT_THROW(masked_log_prob(m, {}, none, {1, 2}), ValueError);
  const auto ms = corrupt({1, 2}, 1.0, 0, c.mask_id());
  EXPECT_THROW(masked_log_prob(m, {}, ms, {1, 2, 3}), ValueError);
  EXPECT_THROW(masked_log_prob(m, Tokens(11, 1), ms, {1, 2}), ValueError);
}

TEST(Elbo, TimestepsAntithetic) {
  ElboConfig cfg{8, 1, true, 42};
  for (int j = 0; j < 8; j += 2) {
    const double a = draw_timestep(cfg, j), b = draw_timestep(cfg, j + 1);
    EXPECT_GT(a, 0.0);
    EXPECT_LE(a, 1.0);
    EXPECT_GT(b, 0.0);
    EXPECT_NEAR(a + b, 1.0, 1e-15);
  }
  cfg.antithetic = false;
  EXPECT_NE(draw_timestep(cfg, 0) + draw_timestep(cfg, 1), 1.0);
}

TEST(Elbo, DrawCountAndDeterminism) {
  const ElboConfig cfg{3, 2, true, 9};
  const auto a = corruption_draws({1, 2, 3, 4}, cfg, 11);
  const auto b = corruption_draws({1, 2, 3, 4}, cfg, 11);
  ASSERT_EQ(a.size(), 6u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].mask_flags, b[i].mask_flags);
    EXPECT_EQ(a[i].t, b[i].t);
  }
  EXPECT_EQ(a[0].t, a[1].t);  // n_yt masks share one timestep
  EXPECT_THROW(corruption_draws({1}, ElboConfig{0, 1, true, 0}, 11), ValueError);
}

TEST(Elbo, SingleTokenZeroVariance) {
  ModelConfig c = small_config();
  const Model m(c, random_weights(c, 8));
  const double exact = masked_log_prob(m, {3}, corrupt({6}, 1.0, 0, c.mask_id()), {6});
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    EXPECT_EQ(elbo_estimate(m, {3}, {6}, ElboConfig{4, 2, seed % 2 == 0, seed}), exact);
  }
}

TEST(Elbo, UniformModelExact) {
  ModelConfig c = small_config();
  const Model m(c, uniform_weights(c));
  for (std::size_t L : {1u, 2u, 5u}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      EXPECT_NEAR(elbo_estimate(m, {1}, Tokens(L, 2), ElboConfig{4, 1, true, seed}),
                  -static_cast<double>(L) * std::log(12.0), 1e-12);
    }
  }
}

TEST(Elbo, MaskCountProbabilities) {
  for (std::size_t L = 1; L <= 5; ++L) {
    double total = 0.0;
    for (std::size_t k = 1; k <= L; ++k) total += oracle::mask_count_probability(k, L);
    EXPECT_NEAR(total, 1.0, 1e-15);
  }
  EXPECT_NEAR(oracle::mask_count_probability(1, 2), 0.75, 1e-15);
}

TEST(Elbo, UnbiasedAgainstEnumeration) {
  ModelConfig c = small_config();
  const auto w = random_weights(c, 9);
  const Model m(c, w);
  const Tokens prompt{1, 7}, resp{4, 0, 9};
  const double exact = oracle::exact_elbo(c, w, prompt, resp);
  const int n = 3000;
  double sum = 0.0, sq = 0.0;
  for (int s = 0; s < n; ++s) {
    const double x = elbo_estimate(m, prompt, resp, ElboConfig{1, 1, false, static_cast<std::uint64_t>(s)});
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sq / n - mean * mean) / (n - 1));
  EXPECT_LT(std::fabs(mean - exact), 3.0 * se) << mean << " vs " << exact << " se " << se;
}

TEST(ByteTokens, Maps) {
  EXPECT_EQ(byte_tokens("Az\xff"), (Tokens{65, 122, 255}));
}
