#include "mechtrace/tracer.hpp"

#include <algorithm>
#include <cmath>

#include "mechtrace/kernels.hpp"
#include "mechtrace/parallel.hpp"

namespace mechtrace {

Tensor logit_lens(const TraceRecord& trace, const ModelBundle& model, int position,
                  int layer) {
  const Tensor& x = trace.residual(layer);
  if (position < 0 || position >= static_cast<int>(x.dim(0)))
    throw NumericError("lens position " + std::to_string(position) + " out of range");
  Tensor out = Tensor::zeros({model.config.vocab_size});
  project_to_vocab(model, x.row_span(position), {out.data.data(), out.data.size()});
  return out;
}

PairLogits logit_lens_pair(const TraceRecord& trace, const ModelBundle& model,
                           int position, int layer, int t_fact, int t_cofa) {
  const Tensor& x = trace.residual(layer);
  return project_pair(model, x.row_span(position), t_fact, t_cofa, true);
}

int LogitLensMap::argmax_group_cofa(int layer) const {
  int best = 0;
  for (int g = 1; g < SpanSet::kGroups; ++g)
    if (cell(layer, g).cofa.mean() > cell(layer, best).cofa.mean()) best = g;
  return best;
}

int LogitLensMap::argmax_group_fact(int layer) const {
  int best = 0;
  for (int g = 1; g < SpanSet::kGroups; ++g)
    if (cell(layer, g).fact.mean() > cell(layer, best).fact.mean()) best = g;
  return best;
}

LogitLensMap layer_position_map(const Dataset& ds, const ModelBundle& model,
                                int workers) {
  const int L = model.config.n_layer;
  const int cells = (L + 1) * SpanSet::kGroups;
  LogitLensMap map;
  map.n_layer = L;
  map.cells.resize(static_cast<size_t>(cells));

  struct Slot {
    // (layer * kGroups + group) -> pair; NaN marks a skipped empty group
    std::vector<float> fact, cofa;
  };
  std::vector<Slot> slots(ds.instances.size());

  CaptureSpec capture;
  capture.residuals = true;
  parallel_for(static_cast<int64_t>(ds.instances.size()), workers, [&](int64_t i) {
    const PromptInstance& inst = ds.instances[static_cast<size_t>(i)];
    HiddenResult res = forward_hidden_traced(model, inst.tokens, capture);
    Slot& slot = slots[static_cast<size_t>(i)];
    slot.fact.assign(static_cast<size_t>(cells), std::nanf(""));
    slot.cofa.assign(static_cast<size_t>(cells), std::nanf(""));
    for (int l = 0; l <= L; ++l) {
      for (int g = 0; g < SpanSet::kGroups; ++g) {
        const TokenRange& span = inst.spans.group(g);
        if (span.empty()) continue;
        const PairLogits p = logit_lens_pair(res.trace, model, span.last_token(), l,
                                             inst.t_fact, inst.t_cofa);
        slot.fact[static_cast<size_t>(l * SpanSet::kGroups + g)] = p.fact;
        slot.cofa[static_cast<size_t>(l * SpanSet::kGroups + g)] = p.cofa;
      }
    }
  });

  for (const Slot& slot : slots)
    for (int c = 0; c < cells; ++c) {
      if (std::isnan(slot.fact[static_cast<size_t>(c)])) continue;
      map.cells[static_cast<size_t>(c)].fact.add(slot.fact[static_cast<size_t>(c)]);
      map.cells[static_cast<size_t>(c)].cofa.add(slot.cofa[static_cast<size_t>(c)]);
    }
  return map;
}

namespace {

double pair_delta(const PairLogits& p) {
  return static_cast<double>(p.cofa) - static_cast<double>(p.fact);
}

}  // namespace

BlockAttribution block_attribution(const Dataset& ds, const ModelBundle& model,
                                   Projection projection, int workers) {
  const int L = model.config.n_layer;
  BlockAttribution out;
  out.projection = projection;
  out.attn_delta.resize(static_cast<size_t>(L));
  out.mlp_delta.resize(static_cast<size_t>(L));

  const bool norm = projection == Projection::FinalNorm;

  struct Slot {
    std::vector<double> attn, mlp;
    double emb = 0.0, final_bare = 0.0, telescope = 0.0, lens_gap = 0.0;
  };
  std::vector<Slot> slots(ds.instances.size());

  CaptureSpec capture;
  capture.block_outputs = true;
  capture.residuals = true;
  parallel_for(static_cast<int64_t>(ds.instances.size()), workers, [&](int64_t i) {
    const PromptInstance& inst = ds.instances[static_cast<size_t>(i)];
    HiddenResult res = forward_hidden_traced(model, inst.tokens, capture);
    const int last = static_cast<int>(inst.tokens.size()) - 1;
    Slot& slot = slots[static_cast<size_t>(i)];
    slot.attn.resize(static_cast<size_t>(L));
    slot.mlp.resize(static_cast<size_t>(L));
    double total = 0.0;
    for (int l = 0; l < L; ++l) {
      const auto a = project_pair(model, res.trace.attn_at(l, last), inst.t_fact,
                                  inst.t_cofa, norm);
      const auto m = project_pair(model, res.trace.mlp_at(l, last), inst.t_fact,
                                  inst.t_cofa, norm);
      slot.attn[static_cast<size_t>(l)] = pair_delta(a);
      slot.mlp[static_cast<size_t>(l)] = pair_delta(m);
      total += pair_delta(a) + pair_delta(m);
    }
    const auto emb = project_pair(model, res.trace.residual(0).row_span(last),
                                  inst.t_fact, inst.t_cofa, norm);
    slot.emb = pair_delta(emb);
    const auto fin_bare = project_pair(model, res.trace.residual(L).row_span(last),
                                       inst.t_fact, inst.t_cofa, false);
    const auto fin_norm = project_pair(model, res.trace.residual(L).row_span(last),
                                       inst.t_fact, inst.t_cofa, true);
    slot.final_bare = pair_delta(norm ? fin_norm : fin_bare);
    slot.telescope = std::abs(slot.emb + total - pair_delta(fin_bare));
    slot.lens_gap = std::abs(pair_delta(fin_norm) - pair_delta(fin_bare));
  });

  for (const Slot& slot : slots) {
    for (int l = 0; l < L; ++l) {
      out.attn_delta[static_cast<size_t>(l)].add(slot.attn[static_cast<size_t>(l)]);
      out.mlp_delta[static_cast<size_t>(l)].add(slot.mlp[static_cast<size_t>(l)]);
    }
    out.embedding_delta.add(slot.emb);
    out.final_delta.add(slot.final_bare);
    out.telescope_gap.add(slot.telescope);
    out.lens_gap.add(slot.lens_gap);
  }
  return out;
}

std::vector<HeadRef> HeadAttribution::most_negative(int k) const {
  std::vector<HeadRef> refs;
  for (int l = 0; l < n_layer; ++l)
    for (int h = 0; h < n_head; ++h) refs.push_back({l, h});
  std::sort(refs.begin(), refs.end(), [&](HeadRef a, HeadRef b) {
    return at(a).mean() < at(b).mean();
  });
  refs.resize(static_cast<size_t>(std::min<int>(k, static_cast<int>(refs.size()))));
  return refs;
}

std::vector<HeadRef> HeadAttribution::most_positive(int k) const {
  std::vector<HeadRef> refs;
  for (int l = 0; l < n_layer; ++l)
    for (int h = 0; h < n_head; ++h) refs.push_back({l, h});
  std::sort(refs.begin(), refs.end(), [&](HeadRef a, HeadRef b) {
    return at(a).mean() > at(b).mean();
  });
  refs.resize(static_cast<size_t>(std::min<int>(k, static_cast<int>(refs.size()))));
  return refs;
}

double HeadAttribution::negative_share(const std::vector<HeadRef>& heads) const {
  double total = 0.0;
  for (int l = 0; l < n_layer; ++l)
    for (int h = 0; h < n_head; ++h) {
      const double m = head_delta[static_cast<size_t>(l * n_head + h)].mean();
      if (m < 0.0) total += -m;
    }
  if (total == 0.0) return 0.0;
  double picked = 0.0;
  for (HeadRef h : heads) {
    const double m = at(h).mean();
    if (m < 0.0) picked += -m;
  }
  return picked / total;
}

HeadAttribution head_attribution(const Dataset& ds, const ModelBundle& model,
                                 Projection projection, int workers) {
  const int L = model.config.n_layer, H = model.config.n_head;
  HeadAttribution out;
  out.projection = projection;
  out.n_layer = L;
  out.n_head = H;
  out.head_delta.resize(static_cast<size_t>(L * H));
  out.bias_delta.resize(static_cast<size_t>(L));

  const bool norm = projection == Projection::FinalNorm;

  struct Slot {
    std::vector<double> head;  // L*H
    std::vector<double> bias;  // L
  };
  std::vector<Slot> slots(ds.instances.size());

  CaptureSpec capture;
  capture.head_outputs = true;
  parallel_for(static_cast<int64_t>(ds.instances.size()), workers, [&](int64_t i) {
    const PromptInstance& inst = ds.instances[static_cast<size_t>(i)];
    HiddenResult res = forward_hidden_traced(model, inst.tokens, capture);
    const int last = static_cast<int>(inst.tokens.size()) - 1;
    Slot& slot = slots[static_cast<size_t>(i)];
    slot.head.resize(static_cast<size_t>(L * H));
    slot.bias.resize(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) {
      for (int h = 0; h < H; ++h) {
        const auto p = project_pair(model, res.trace.head_at(l, h, last), inst.t_fact,
                                    inst.t_cofa, norm);
        slot.head[static_cast<size_t>(l * H + h)] = pair_delta(p);
      }
      const auto& bo = model.layers[static_cast<size_t>(l)].attn.bo;
      const auto pb = project_pair(model, {bo.data.data(), bo.data.size()}, inst.t_fact,
                                   inst.t_cofa, norm);
      slot.bias[static_cast<size_t>(l)] = pair_delta(pb);
    }
  });

  for (const Slot& slot : slots) {
    for (int c = 0; c < L * H; ++c)
      out.head_delta[static_cast<size_t>(c)].add(slot.head[static_cast<size_t>(c)]);
    for (int l = 0; l < L; ++l)
      out.bias_delta[static_cast<size_t>(l)].add(slot.bias[static_cast<size_t>(l)]);
  }
  return out;
}

int HeadAttentionProfile::argmax_group(int head_index) const {
  int best = 0;
  for (int g = 1; g < SpanSet::kGroups; ++g)
    if (at(head_index, g).mean() > at(head_index, best).mean()) best = g;
  return best;
}

HeadAttentionProfile head_attention_profile(const Dataset& ds, const ModelBundle& model,
                                            const std::vector<HeadRef>& heads,
                                            int workers) {
  for (HeadRef h : heads)
    if (h.layer < 0 || h.layer >= model.config.n_layer || h.head < 0 ||
        h.head >= model.config.n_head)
      throw NumericError("unknown head " + h.str());

  HeadAttentionProfile out;
  out.heads = heads;
  out.mass.resize(heads.size() * SpanSet::kGroups);

  struct Slot {
    std::vector<double> mass;
  };
  std::vector<Slot> slots(ds.instances.size());

  CaptureSpec capture;
  capture.attention = true;
  parallel_for(static_cast<int64_t>(ds.instances.size()), workers, [&](int64_t i) {
    const PromptInstance& inst = ds.instances[static_cast<size_t>(i)];
    HiddenResult res = forward_hidden_traced(model, inst.tokens, capture);
    const int last = static_cast<int>(inst.tokens.size()) - 1;
    Slot& slot = slots[static_cast<size_t>(i)];
    slot.mass.assign(heads.size() * SpanSet::kGroups, 0.0);
    for (size_t hi = 0; hi < heads.size(); ++hi) {
      for (int g = 0; g < SpanSet::kGroups; ++g) {
        const TokenRange& span = inst.spans.group(g);
        double m = 0.0;
        for (int j = span.begin; j < span.end; ++j)
          m += res.trace.attention_value(heads[hi].layer, heads[hi].head, last, j);
        slot.mass[hi * SpanSet::kGroups + static_cast<size_t>(g)] = m;
      }
    }
  });

  for (const Slot& slot : slots)
    for (size_t c = 0; c < out.mass.size(); ++c) out.mass[c].add(slot.mass[c]);
  return out;
}

RankCurves rank_curves(const Dataset& ds, const ModelBundle& model, int group,
                       int workers) {
  if (group < 0 || group >= SpanSet::kGroups)
    throw NumericError("rank curves group out of range");
  const int L = model.config.n_layer;
  RankCurves out;
  out.group = group;
  out.fact_rank.resize(static_cast<size_t>(L + 1));
  out.cofa_rank.resize(static_cast<size_t>(L + 1));

  struct Slot {
    std::vector<int64_t> fact, cofa;  // per layer; empty when group missing
  };
  std::vector<Slot> slots(ds.instances.size());

  CaptureSpec capture;
  capture.residuals = true;
  parallel_for(static_cast<int64_t>(ds.instances.size()), workers, [&](int64_t i) {
    const PromptInstance& inst = ds.instances[static_cast<size_t>(i)];
    const TokenRange& span = inst.spans.group(group);
    if (span.empty()) return;
    HiddenResult res = forward_hidden_traced(model, inst.tokens, capture);
    const int pos = span.last_token();
    Slot& slot = slots[static_cast<size_t>(i)];
    std::vector<float> logits(static_cast<size_t>(model.config.vocab_size));
    for (int l = 0; l <= L; ++l) {
      project_to_vocab(model, res.trace.residual(l).row_span(pos),
                       {logits.data(), logits.size()});
      slot.fact.push_back(rank_of(std::span<const float>(logits), inst.t_fact));
      slot.cofa.push_back(rank_of(std::span<const float>(logits), inst.t_cofa));
    }
  });

  std::vector<std::vector<int64_t>> fact_all(static_cast<size_t>(L + 1)),
      cofa_all(static_cast<size_t>(L + 1));
  for (const Slot& slot : slots) {
    if (slot.fact.empty()) continue;
    for (int l = 0; l <= L; ++l) {
      out.fact_rank[static_cast<size_t>(l)].add(
          static_cast<double>(slot.fact[static_cast<size_t>(l)]));
      out.cofa_rank[static_cast<size_t>(l)].add(
          static_cast<double>(slot.cofa[static_cast<size_t>(l)]));
      fact_all[static_cast<size_t>(l)].push_back(slot.fact[static_cast<size_t>(l)]);
      cofa_all[static_cast<size_t>(l)].push_back(slot.cofa[static_cast<size_t>(l)]);
    }
  }
  auto median = [](std::vector<int64_t>& v) -> double {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? static_cast<double>(v[n / 2])
                 : 0.5 * (static_cast<double>(v[n / 2 - 1]) + static_cast<double>(v[n / 2]));
  };
  for (int l = 0; l <= L; ++l) {
    out.fact_median.push_back(median(fact_all[static_cast<size_t>(l)]));
    out.cofa_median.push_back(median(cofa_all[static_cast<size_t>(l)]));
  }
  return out;
}

std::vector<uint8_t> fact_win_flags(const Dataset& ds, const ModelBundle& model,
                                    int workers, const InstanceResolver& resolver) {
  std::vector<uint8_t> fact_win(ds.instances.size(), 0);
  parallel_for(static_cast<int64_t>(ds.instances.size()), workers, [&](int64_t i) {
    const PromptInstance& inst = ds.instances[static_cast<size_t>(i)];
    ResolvedIntervention iv;
    const ResolvedIntervention* ivp = nullptr;
    if (resolver) {
      iv = resolver(inst);
      ivp = &iv;
    }
    Tensor x = forward_hidden(model, inst.tokens, ivp);
    const PairLogits p = project_pair(model, x.row_span(x.dim(0) - 1), inst.t_fact,
                                      inst.t_cofa, true);
    fact_win[static_cast<size_t>(i)] = p.fact > p.cofa ? 1 : 0;  // ties -> cofa
  });
  return fact_win;
}

WinRates rates_from_flags(std::span<const uint8_t> flags) {
  WinRates out;
  out.n = static_cast<int64_t>(flags.size());
  for (uint8_t w : flags) out.fact_wins += w;
  return out;
}

WinRates win_rates(const Dataset& ds, const ModelBundle& model, int workers,
                   const InstanceResolver& resolver) {
  const auto flags = fact_win_flags(ds, model, workers, resolver);
  return rates_from_flags(flags);
}

}  // namespace mechtrace
