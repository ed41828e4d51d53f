#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "mechtrace/intervention.hpp"
#include "mechtrace/kernels.hpp"
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

TEST_CASE("spec edits resolve to (last, attribute) by default") {
  const ModelConfig cfg = small_config();
  const PromptInstance inst = testutil::synth_instance(cfg, 12, 1);
  InterventionSpec spec = InterventionSpec::scale_heads({{2, 1}}, 5.0f);
  const ResolvedIntervention iv = spec.resolve(inst);
  REQUIRE(iv.edits.size() == 1);
  CHECK(iv.edits[0].row == static_cast<int>(inst.tokens.size()) - 1);
  CHECK(iv.edits[0].col == inst.spans.attribute.last_token());
  CHECK(iv.edits[0].alpha == 5.0f);

  InterventionSpec pinned;
  InterventionSpec::Edit e;
  e.layer = 0;
  e.head = 0;
  e.alpha = 2.0f;
  e.row = 7;
  e.col = 2;
  pinned.edits.push_back(e);
  const ResolvedIntervention iv2 = pinned.resolve(inst);
  CHECK(iv2.edits[0].row == 7);
  CHECK(iv2.edits[0].col == 2);
}

TEST_CASE("alpha=1 reproduces clean rates and verifies as a bitwise no-op") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::random_model(cfg, 2);
  const Dataset ds = testutil::synth_dataset(cfg, 6, 10);
  const std::vector<HeadRef> heads = {{1, 0}, {2, 3}};

  const AlphaResult r = apply_alpha(ds, m, heads, 1.0f, 2);
  CHECK(r.edited.fact_wins == r.clean.fact_wins);
  CHECK(verify_noop(ds, m, InterventionSpec::scale_heads(heads, 1.0f), 2));
  CHECK_FALSE(verify_noop(ds, m, InterventionSpec::scale_heads(heads, 5.0f), 2));
}

TEST_CASE("resumed intervention runs match full forwards on win flags") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::random_model(cfg, 3);
  const Dataset ds = testutil::synth_dataset(cfg, 8, 77);
  const std::vector<HeadRef> heads = {{1, 2}};
  const float alpha = 30.0f;

  const AlphaResult fast = apply_alpha(ds, m, heads, alpha, 2);
  // independent slow path: full forward with the resolved edits
  const InterventionSpec spec = InterventionSpec::scale_heads(heads, alpha);
  int64_t fact_wins = 0;
  for (const auto& inst : ds.instances) {
    const ResolvedIntervention iv = spec.resolve(inst);
    const ForwardResult res = forward(m, inst.tokens, {}, &iv);
    const int64_t last = res.logits.dim(0) - 1;
    if (res.logits.at(last, inst.t_fact) > res.logits.at(last, inst.t_cofa)) ++fact_wins;
  }
  CHECK(fast.edited.fact_wins == fact_wins);
  CHECK(fast.edited.n == static_cast<int64_t>(ds.instances.size()));
}

TEST_CASE("single-layer closed-form oracle for an alpha edit") {
  // one layer, one head, zeroed MLP: the final logits are a hand-computable
  // function of the attention weights
  ModelConfig cfg;
  cfg.n_layer = 1;
  cfg.n_head = 1;
  cfg.d_model = 4;
  cfg.vocab_size = 6;
  cfg.n_ctx = 8;
  ModelBundle m = testutil::random_model(cfg, 4, 0.3f);
  for (Tensor* t : {&m.layers[0].mlp.w_in, &m.layers[0].mlp.b_in, &m.layers[0].mlp.w_out,
                    &m.layers[0].mlp.b_out})
    std::fill(t->data.begin(), t->data.end(), 0.0f);

  const std::vector<int> tokens = {1, 4, 2, 5};
  const int k = 4, d = 4;
  const float alpha = 5.0f;
  const int erow = 3, ecol = 1;

  // oracle in double precision, straight from the layer equations
  auto ln = [&](const std::vector<double>& x, const Tensor& g, const Tensor& b) {
    double mean = 0, var = 0;
    for (double v : x) mean += v;
    mean /= d;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= d;
    std::vector<double> out(d);
    for (int j = 0; j < d; ++j)
      out[size_t(j)] = (x[size_t(j)] - mean) / std::sqrt(var + double(cfg.ln_eps)) *
                           g.data[size_t(j)] +
                       b.data[size_t(j)];
    return out;
  };
  auto matvec = [&](const std::vector<double>& x, const Tensor& w, const Tensor& b) {
    std::vector<double> out(static_cast<size_t>(w.dim(1)), 0.0);
    for (int64_t j = 0; j < w.dim(1); ++j) {
      double acc = b.numel() ? b.data[size_t(j)] : 0.0;
      for (int64_t p = 0; p < w.dim(0); ++p) acc += x[size_t(p)] * w.at(p, j);
      out[size_t(j)] = acc;
    }
    return out;
  };

  std::vector<std::vector<double>> x0(k), q(k), kk(k), v(k);
  for (int i = 0; i < k; ++i) {
    x0[size_t(i)].resize(d);
    for (int j = 0; j < d; ++j)
      x0[size_t(i)][size_t(j)] = double(m.wte.at(tokens[size_t(i)], j)) + m.wpe.at(i, j);
    const auto n = ln(x0[size_t(i)], m.layers[0].ln1.gain, m.layers[0].ln1.bias);
    q[size_t(i)] = matvec(n, m.layers[0].attn.wq, m.layers[0].attn.bq);
    kk[size_t(i)] = matvec(n, m.layers[0].attn.wk, m.layers[0].attn.bk);
    v[size_t(i)] = matvec(n, m.layers[0].attn.wv, m.layers[0].attn.bv);
  }
  // attention rows with causal mask, softmax, then the single scaled entry
  std::vector<std::vector<double>> att(k, std::vector<double>(k, 0.0));
  for (int i = 0; i < k; ++i) {
    double mx = -1e300;
    std::vector<double> row(static_cast<size_t>(i) + 1);
    for (int j = 0; j <= i; ++j) {
      double s = 0;
      for (int c = 0; c < d; ++c) s += q[size_t(i)][size_t(c)] * kk[size_t(j)][size_t(c)];
      row[size_t(j)] = s / std::sqrt(double(d));
      mx = std::max(mx, row[size_t(j)]);
    }
    double sum = 0;
    for (int j = 0; j <= i; ++j) {
      row[size_t(j)] = std::exp(row[size_t(j)] - mx);
      sum += row[size_t(j)];
    }
    for (int j = 0; j <= i; ++j) att[size_t(i)][size_t(j)] = row[size_t(j)] / sum;
  }
  att[erow][ecol] *= alpha;  // post-softmax, no renormalization

  // weighted sum of value vectors, output projection, residual add, lens
  std::vector<double> final_logits(static_cast<size_t>(cfg.vocab_size));
  {
    const int i = k - 1;
    std::vector<double> ctx(d, 0.0);
    for (int j = 0; j <= i; ++j)
      for (int c = 0; c < d; ++c) ctx[size_t(c)] += att[size_t(i)][size_t(j)] * v[size_t(j)][size_t(c)];
    auto attn_out = matvec(ctx, m.layers[0].attn.wo, m.layers[0].attn.bo);
    std::vector<double> x1(d);
    for (int c = 0; c < d; ++c) x1[size_t(c)] = x0[size_t(i)][size_t(c)] + attn_out[size_t(c)];
    // zeroed MLP adds gelu(0) * W + 0 = 0
    const auto lnf = ln(x1, m.ln_f.gain, m.ln_f.bias);
    for (int t = 0; t < cfg.vocab_size; ++t) {
      double s = 0;
      for (int c = 0; c < d; ++c) s += lnf[size_t(c)] * m.wte.at(t, c);
      final_logits[size_t(t)] = s;
    }
  }

  ResolvedIntervention iv;
  iv.edits.push_back({0, 0, erow, ecol, alpha});
  const ForwardResult res = forward(m, tokens, {}, &iv);
  for (int t = 0; t < cfg.vocab_size; ++t)
    CHECK(std::abs(res.logits.at(k - 1, t) - final_logits[size_t(t)]) <= 1e-5);
}

TEST_CASE("empty ablation set reproduces clean rates") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::random_model(cfg, 5);
  const Dataset ds = testutil::synth_dataset(cfg, 5, 15);
  const AblationResult r = ablate_heads(ds, m, {}, 2);
  CHECK(r.ablated.fact_wins == r.clean.fact_wins);
}

TEST_CASE("ablating every head in a layer leaves only the output bias") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::random_model(cfg, 6);
  const PromptInstance inst = testutil::synth_instance(cfg, 10, 4);

  ResolvedIntervention iv;
  for (int h = 0; h < cfg.n_head; ++h) iv.ablations.push_back({1, h});

  CaptureSpec cap;
  cap.block_outputs = true;
  cap.block_outputs_full = true;
  const ForwardResult res = forward(m, inst.tokens, cap, &iv);
  const auto& bo = m.layers[1].attn.bo;
  for (int i = 0; i < static_cast<int>(inst.tokens.size()); ++i) {
    const auto a = res.trace.attn_at(1, i);
    for (int j = 0; j < cfg.d_model; ++j) CHECK(a[size_t(j)] == bo.data[size_t(j)]);
  }
}

TEST_CASE("grid search maximizes the factual rate with deterministic ties") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::random_model(cfg, 7);
  const Dataset ds = testutil::synth_dataset(cfg, 10, 31);
  const std::vector<HeadRef> heads = {{1, 1}, {2, 0}};

  const GridSearchResult one = grid_search_alpha(ds, m, heads, {1.0f}, 2);
  CHECK(one.alpha_star == 1.0f);
  CHECK(one.rates[0].fact_wins == one.clean.fact_wins);

  const GridSearchResult fwd = grid_search_alpha(ds, m, heads, {2, 5, 10, 100}, 2);
  const GridSearchResult rev = grid_search_alpha(ds, m, heads, {100, 10, 5, 2}, 2);
  CHECK(fwd.alpha_star == rev.alpha_star);
  // the winner attains the max
  for (const auto& r : fwd.rates) {
    int64_t star_wins = 0;
    for (size_t i = 0; i < fwd.candidates.size(); ++i)
      if (fwd.candidates[i] == fwd.alpha_star) star_wins = fwd.rates[i].fact_wins;
    CHECK(star_wins >= r.fact_wins);
  }

  // exact tie between candidates -> the smaller alpha wins
  const GridSearchResult tie = grid_search_alpha(ds, m, heads, {3.0f, 3.0f}, 1);
  CHECK(tie.alpha_star == 3.0f);
}

TEST_CASE("attention entry counting") {
  ModelConfig gpt2 = ModelConfig::gpt2_small();
  CHECK(count_attention_entries(gpt2, 21) == 33264);
  ModelConfig tiny;
  tiny.n_layer = 1;
  tiny.n_head = 1;
  tiny.d_model = 4;
  tiny.vocab_size = 10;
  tiny.n_ctx = 8;
  CHECK(count_attention_entries(tiny, 1) == 1);
  CHECK(count_attention_entries(tiny, 2) == 3);
  CHECK_THROWS_AS((void)count_attention_entries(tiny, 0), NumericError);
}

TEST_CASE("intervention specs round-trip through JSON with validation") {
  InterventionSpec spec;
  InterventionSpec::Edit e;
  e.layer = 10;
  e.head = 7;
  e.alpha = 5.0f;
  spec.edits.push_back(e);
  e.layer = 11;
  e.head = 10;
  e.row = 20;
  e.col = 8;
  spec.edits.push_back(e);
  spec.ablations.push_back({3, 2});

  testutil::TempDir tmp;
  {
    std::ofstream f(tmp.file("spec.json"));
    f << spec.to_json();
  }
  const InterventionSpec rt = InterventionSpec::from_json_file(tmp.file("spec.json"));
  REQUIRE(rt.edits.size() == 2);
  CHECK(rt.edits[0].layer == 10);
  CHECK(rt.edits[0].alpha == 5.0f);
  CHECK_FALSE(rt.edits[0].row.has_value());
  CHECK(rt.edits[1].row == 20);
  REQUIRE(rt.ablations.size() == 1);
  CHECK(rt.ablations[0].str() == "L3H2");

  {
    std::ofstream f(tmp.file("bad.json"));
    f << R"({"edits": [{"layer": 0, "head": 0, "alpha": -1}]})";
  }
  CHECK_THROWS_AS(InterventionSpec::from_json_file(tmp.file("bad.json")), SchemaError);
}

TEST_CASE("head list parsing") {
  const auto heads = parse_head_list("L10H7,L11H10");
  REQUIRE(heads.size() == 2);
  CHECK(heads[0].layer == 10);
  CHECK(heads[0].head == 7);
  CHECK(heads[1].str() == "L11H10");
  CHECK_THROWS_AS((void)parse_head_ref("10H7"), InputError);
  CHECK_THROWS_AS((void)parse_head_ref("LxHy"), InputError);
}

TEST_CASE("edits below the grid's resume layer are rejected by forward_from") {
  const ModelConfig cfg = small_config();
  const ModelBundle m = testutil::random_model(cfg, 8);
  const PromptInstance inst = testutil::synth_instance(cfg, 10, 3);
  CaptureSpec cap;
  cap.residuals = true;
  const ForwardResult clean = forward(m, inst.tokens, cap);
  ResolvedIntervention iv;
  iv.edits.push_back({0, 0, 5, 1, 2.0f});
  CHECK_THROWS_AS((void)forward_from(m, clean.trace, 1, {}, &iv), NumericError);
}
