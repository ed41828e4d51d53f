#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "mechtrace/kernels.hpp"
#include "mechtrace/reports.hpp"
#include "mechtrace/tracer.hpp"
#include "testutil.hpp"

using namespace mechtrace;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.n_layer = 3;
  cfg.n_head = 4;
  cfg.d_model = 16;
  cfg.vocab_size = 97;
  cfg.n_ctx = 32;
  return cfg;
}

}  // namespace

TEST_CASE("lens at the final layer and position reproduces model logits") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::random_model(cfg, 10);
  const PromptInstance inst = testutil::synth_instance(cfg, 12, 1);

  CaptureSpec cap;
  cap.residuals = true;
  const ForwardResult res = forward(m, inst.tokens, cap);
  const int last = static_cast<int>(inst.tokens.size()) - 1;
  const Tensor lens = logit_lens(res.trace, m, last, cfg.n_layer);
  for (int v = 0; v < cfg.vocab_size; ++v)
    CHECK(std::abs(lens.data[size_t(v)] - res.logits.at(last, v)) <= 1e-4f);
}

TEST_CASE("lens of a zero residual equals the closed form") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::random_model(cfg, 11);
  std::vector<float> zero(static_cast<size_t>(cfg.d_model), 0.0f);
  std::vector<float> lens(static_cast<size_t>(cfg.vocab_size));
  project_to_vocab(m, zero, lens);
  // ln_f(0) = bias, so the lens is W_U applied to the bias vector
  for (int v = 0; v < cfg.vocab_size; ++v) {
    const float want = dot({m.ln_f.bias.data.data(), m.ln_f.bias.data.size()},
                           m.wte.row_span(v));
    CHECK(lens[size_t(v)] == doctest::Approx(want).epsilon(1e-5));
  }
}

TEST_CASE("single-instance lens map has zero variance and matches direct lens") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::random_model(cfg, 12);
  Dataset ds = testutil::synth_dataset(cfg, 1, 5);
  const LogitLensMap map = layer_position_map(ds, m, 2);

  CaptureSpec cap;
  cap.residuals = true;
  const ForwardResult res = forward(m, ds.instances[0].tokens, cap);
  for (int l = 0; l <= cfg.n_layer; ++l)
    for (int g = 0; g < SpanSet::kGroups; ++g) {
      const TokenRange& span = ds.instances[0].spans.group(g);
      if (span.empty()) continue;
      const GroupCell& c = map.cell(l, g);
      CHECK(c.fact.n == 1);
      CHECK(c.fact.variance() == doctest::Approx(0.0));
      const PairLogits p = logit_lens_pair(res.trace, m, span.last_token(), l,
                                           ds.instances[0].t_fact, ds.instances[0].t_cofa);
      CHECK(c.fact.mean() == doctest::Approx(double(p.fact)).epsilon(1e-6));
      CHECK(c.cofa.mean() == doctest::Approx(double(p.cofa)).epsilon(1e-6));
    }
}

TEST_CASE("lens map aggregation is permutation invariant") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::random_model(cfg, 13);
  Dataset ds = testutil::synth_dataset(cfg, 12, 100);
  Dataset shuffled = ds;
  std::mt19937 rng(3);
  std::shuffle(shuffled.instances.begin(), shuffled.instances.end(), rng);
  const LogitLensMap a = layer_position_map(ds, m, 2);
  const LogitLensMap b = layer_position_map(shuffled, m, 2);
  for (int l = 0; l <= cfg.n_layer; ++l)
    for (int g = 0; g < SpanSet::kGroups; ++g) {
      CHECK(a.cell(l, g).fact.mean() ==
            doctest::Approx(b.cell(l, g).fact.mean()).epsilon(1e-9));
      CHECK(a.cell(l, g).cofa.variance() ==
            doctest::Approx(b.cell(l, g).cofa.variance()).epsilon(1e-9));
    }
}

TEST_CASE("aggregation outputs are byte-identical across worker counts") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::random_model(cfg, 14);
  Dataset ds = testutil::synth_dataset(cfg, 9, 40);
  const std::string csv1 = lens_map_csv(layer_position_map(ds, m, 1));
  const std::string csv3 = lens_map_csv(layer_position_map(ds, m, 3));
  const std::string csv8 = lens_map_csv(layer_position_map(ds, m, 8));
  CHECK(csv1 == csv3);
  CHECK(csv1 == csv8);

  const std::string ha1 = head_attribution_csv(head_attribution(ds, m, Projection::Bare, 1));
  const std::string ha4 = head_attribution_csv(head_attribution(ds, m, Projection::Bare, 4));
  CHECK(ha1 == ha4);
}

TEST_CASE("zero-block model attributes zero everywhere") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::zero_block_model(cfg, 15);
  Dataset ds = testutil::synth_dataset(cfg, 3, 7);
  const BlockAttribution ba = block_attribution(ds, m, Projection::Bare, 2);
  for (int l = 0; l < cfg.n_layer; ++l) {
    CHECK(ba.attn_delta[size_t(l)].mean() == doctest::Approx(0.0));
    CHECK(ba.mlp_delta[size_t(l)].mean() == doctest::Approx(0.0));
  }
  const HeadAttribution ha = head_attribution(ds, m, Projection::Bare, 2);
  for (const auto& hd : ha.head_delta) CHECK(hd.mean() == doctest::Approx(0.0));
}

TEST_CASE("head deltas plus the bias delta reconstruct the block delta") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::random_model(cfg, 16);
  Dataset ds = testutil::synth_dataset(cfg, 5, 60);
  const BlockAttribution ba = block_attribution(ds, m, Projection::Bare, 2);
  const HeadAttribution ha = head_attribution(ds, m, Projection::Bare, 2);
  for (int l = 0; l < cfg.n_layer; ++l) {
    double head_sum = 0.0;
    for (int h = 0; h < cfg.n_head; ++h)
      head_sum += ha.head_delta[size_t(l * cfg.n_head + h)].mean();
    const double want = ba.attn_delta[size_t(l)].mean() - ha.bias_delta[size_t(l)].mean();
    CHECK(std::abs(head_sum - want) <= 1e-3);
  }
}

TEST_CASE("bare-projection deltas telescope to the final logit difference") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::random_model(cfg, 17);
  Dataset ds = testutil::synth_dataset(cfg, 6, 90);
  const BlockAttribution ba = block_attribution(ds, m, Projection::Bare, 2);
  CHECK(ba.telescope_gap.mean() <= 1e-2);
  // the final-layernorm discrepancy is reported, not asserted
  CHECK(ba.lens_gap.n == 6);
  CHECK(ba.lens_gap.mean() >= 0.0);

  double total = ba.embedding_delta.mean();
  for (int l = 0; l < cfg.n_layer; ++l)
    total += ba.attn_delta[size_t(l)].mean() + ba.mlp_delta[size_t(l)].mean();
  CHECK(std::abs(total - ba.final_delta.mean()) <= 1e-2);
}

TEST_CASE("both projection conventions are exposed and differ in general") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::random_model(cfg, 18);
  Dataset ds = testutil::synth_dataset(cfg, 3, 21);
  const BlockAttribution bare = block_attribution(ds, m, Projection::Bare, 1);
  const BlockAttribution normed = block_attribution(ds, m, Projection::FinalNorm, 1);
  bool any_diff = false;
  for (int l = 0; l < cfg.n_layer; ++l)
    any_diff = any_diff ||
               std::abs(bare.attn_delta[size_t(l)].mean() -
                        normed.attn_delta[size_t(l)].mean()) > 1e-9;
  CHECK(any_diff);
}

TEST_CASE("attention profile group masses partition the last row") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::random_model(cfg, 19);
  Dataset ds = testutil::synth_dataset(cfg, 4, 33);
  std::vector<HeadRef> heads;
  for (int h = 0; h < cfg.n_head; ++h) heads.push_back({1, h});
  const HeadAttentionProfile prof = head_attention_profile(ds, m, heads, 2);
  for (size_t hi = 0; hi < heads.size(); ++hi) {
    double sum = 0.0;
    for (int g = 0; g < SpanSet::kGroups; ++g) sum += prof.at(static_cast<int>(hi), g).mean();
    CHECK(std::abs(sum - 1.0) <= 1e-4);
  }
  CHECK_THROWS_AS(
      (void)head_attention_profile(ds, m, {{cfg.n_layer, 0}}, 1), NumericError);
}

TEST_CASE("rank curves stay in range and hit rank one at the output") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::random_model(cfg, 20);
  PromptInstance inst = testutil::synth_instance(cfg, 12, 77);
  // make t_fact the model's argmax so the final rank is exactly 1
  const ForwardResult res = forward(m, inst.tokens);
  const int last = static_cast<int>(inst.tokens.size()) - 1;
  int arg = 0;
  for (int v = 1; v < cfg.vocab_size; ++v)
    if (res.logits.at(last, v) > res.logits.at(last, arg)) arg = v;
  inst.t_fact = arg;
  if (inst.t_cofa == arg) inst.t_cofa = (arg + 1) % cfg.vocab_size;
  Dataset ds;
  ds.instances.push_back(inst);

  const int group_last = *SpanSet::group_index("last");
  const RankCurves rc = rank_curves(ds, m, group_last, 1);
  REQUIRE(rc.fact_rank.size() == static_cast<size_t>(cfg.n_layer + 1));
  for (size_t l = 0; l < rc.fact_rank.size(); ++l) {
    CHECK(rc.fact_rank[l].mean() >= 1.0);
    CHECK(rc.fact_rank[l].mean() <= cfg.vocab_size);
    CHECK(rc.cofa_rank[l].mean() >= 1.0);
    CHECK(rc.cofa_rank[l].mean() <= cfg.vocab_size);
  }
  CHECK(rc.fact_rank.back().mean() == doctest::Approx(1.0));
  CHECK(rc.fact_median.back() == doctest::Approx(1.0));
}

TEST_CASE("equal logits count as a counterfactual win") {
  const ModelConfig cfg = small_config();
  ModelBundle m = testutil::zero_block_model(cfg, 22);
  Dataset ds = testutil::synth_dataset(cfg, 1, 50);
  // identical unembedding rows force an exact tie
  const int tf = ds.instances[0].t_fact, tc = ds.instances[0].t_cofa;
  for (int j = 0; j < cfg.d_model; ++j) m.wte.at(tf, j) = m.wte.at(tc, j);
  const WinRates w = win_rates(ds, m, 1);
  CHECK(w.n == 1);
  CHECK(w.fact_wins == 0);
  CHECK(w.cofa_rate() == doctest::Approx(1.0));
}

TEST_CASE("win rates carry Wilson confidence intervals") {
  WinRates w;
  w.n = 1000;
  w.fact_wins = 40;
  const Interval ci = w.fact_ci();
  CHECK(ci.lo > 0.0);
  CHECK(ci.lo < 0.04);
  CHECK(ci.hi > 0.04);
  CHECK(ci.hi < 0.06);
  CHECK(w.fact_rate() == doctest::Approx(0.04));
  CHECK(w.cofa_rate() == doctest::Approx(0.96));
}

TEST_CASE("uncaptured lens requests surface as errors") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::random_model(cfg, 23);
  const PromptInstance inst = testutil::synth_instance(cfg, 10, 2);
  const ForwardResult res = forward(m, inst.tokens);  // nothing captured
  CHECK_THROWS_AS((void)logit_lens(res.trace, m, 0, 0), SchemaError);
}
