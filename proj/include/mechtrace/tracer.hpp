#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "mechtrace/corpus.hpp"
#include "mechtrace/model.hpp"
#include "mechtrace/stats.hpp"

namespace mechtrace {

// How block/head outputs are projected to the vocabulary. Bare applies the
// unembedding directly (the default); FinalNorm passes the activation
// through the final layernorm first, like the residual-stream lens does.
enum class Projection { Bare, FinalNorm };

// full-vocabulary residual-stream lens: W_U * ln_f(x_i^l)
Tensor logit_lens(const TraceRecord& trace, const ModelBundle& model, int position,
                  int layer);

// fact/cofa logit pair from a captured residual, final layernorm applied
PairLogits logit_lens_pair(const TraceRecord& trace, const ModelBundle& model,
                           int position, int layer, int t_fact, int t_cofa);

// --- layer x position lens map -----------------------------------------------

struct GroupCell {
  RunningMoments fact, cofa;
};

struct LogitLensMap {
  int n_layer = 0;  // cells cover layers 0..n_layer inclusive
  std::vector<GroupCell> cells;  // (layer * kGroups + group)

  GroupCell& cell(int layer, int group) {
    return cells[static_cast<size_t>(layer * SpanSet::kGroups + group)];
  }
  const GroupCell& cell(int layer, int group) const {
    return cells[static_cast<size_t>(layer * SpanSet::kGroups + group)];
  }
  // group with the highest mean logit of the given token at a layer
  int argmax_group_cofa(int layer) const;
  int argmax_group_fact(int layer) const;
};

// Aggregates lens logits of t_fact/t_cofa per (layer, position group) over
// the dataset; a group is represented by the last token of its span and
// skipped when its span is empty for an instance.
LogitLensMap layer_position_map(const Dataset& ds, const ModelBundle& model,
                                int workers = 1);

// --- block / head attribution ------------------------------------------------

struct BlockAttribution {
  Projection projection = Projection::Bare;
  std::vector<RunningMoments> attn_delta;  // per layer, at the last position
  std::vector<RunningMoments> mlp_delta;
  RunningMoments embedding_delta;  // projection of x^0 at the last position
  RunningMoments final_delta;      // projection of x^L, same convention
  // mean absolute telescoping residual per instance:
  // |emb + sum(blocks) - final| under the bare projection
  RunningMoments telescope_gap;
  // final-layernorm discrepancy, reported not asserted:
  // |delta(W_U ln_f(x^L)) - delta(W_U x^L)|
  RunningMoments lens_gap;
};

BlockAttribution block_attribution(const Dataset& ds, const ModelBundle& model,
                                   Projection projection = Projection::Bare,
                                   int workers = 1);

struct HeadAttribution {
  Projection projection = Projection::Bare;
  int n_layer = 0, n_head = 0;
  std::vector<RunningMoments> head_delta;  // (layer * n_head + head)
  std::vector<RunningMoments> bias_delta;  // per layer: output-bias share

  const RunningMoments& at(HeadRef h) const {
    return head_delta[static_cast<size_t>(h.layer * n_head + h.head)];
  }
  // heads sorted by ascending mean delta (most counterfactual-suppressing first)
  std::vector<HeadRef> most_negative(int k) const;
  std::vector<HeadRef> most_positive(int k) const;
  // fraction of the total negative head contribution carried by `heads`
  double negative_share(const std::vector<HeadRef>& heads) const;
};

HeadAttribution head_attribution(const Dataset& ds, const ModelBundle& model,
                                 Projection projection = Projection::Bare,
                                 int workers = 1);

// --- attention profiles -------------------------------------------------------

struct HeadAttentionProfile {
  std::vector<HeadRef> heads;
  // (head_index * kGroups + group): attention mass from the last position
  std::vector<RunningMoments> mass;

  const RunningMoments& at(int head_index, int group) const {
    return mass[static_cast<size_t>(head_index * SpanSet::kGroups + group)];
  }
  int argmax_group(int head_index) const;
};

HeadAttentionProfile head_attention_profile(const Dataset& ds, const ModelBundle& model,
                                            const std::vector<HeadRef>& heads,
                                            int workers = 1);

// --- rank curves ---------------------------------------------------------------

struct RankCurves {
  int group = 0;
  std::vector<RunningMoments> fact_rank, cofa_rank;  // per layer 0..L
  std::vector<double> fact_median, cofa_median;
};

RankCurves rank_curves(const Dataset& ds, const ModelBundle& model, int group,
                       int workers = 1);

// --- win rates -----------------------------------------------------------------

struct WinRates {
  int64_t n = 0;
  int64_t fact_wins = 0;  // logit(t_fact) > logit(t_cofa); ties go to cofa
  double fact_rate() const { return n ? static_cast<double>(fact_wins) / n : 0.0; }
  double cofa_rate() const { return n ? 1.0 - fact_rate() : 0.0; }
  int64_t cofa_wins() const { return n - fact_wins; }
  Interval fact_ci() const { return wilson_interval(fact_wins, n); }
  Interval cofa_ci() const { return wilson_interval(cofa_wins(), n); }
};

// per-instance attention edits/ablations, resolved against the instance
using InstanceResolver = std::function<ResolvedIntervention(const PromptInstance&)>;

// 1 where logit(t_fact) > logit(t_cofa) at the final position, else 0
std::vector<uint8_t> fact_win_flags(const Dataset& ds, const ModelBundle& model,
                                    int workers = 1,
                                    const InstanceResolver& resolver = nullptr);

WinRates win_rates(const Dataset& ds, const ModelBundle& model, int workers = 1,
                   const InstanceResolver& resolver = nullptr);

WinRates rates_from_flags(std::span<const uint8_t> flags);

}  // namespace mechtrace
