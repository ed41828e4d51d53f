#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mechtrace/corpus.hpp"
#include "mechtrace/model.hpp"
#include "mechtrace/tracer.hpp"

namespace mechtrace {

// Attention-entry scaling and head ablation, resolved per instance: by
// default an edit targets the entry (row = last position, column =
// attribute position); explicit row/col override that for synthetic runs.
struct InterventionSpec {
  struct Edit {
    int layer = 0, head = 0;
    float alpha = 1.0f;
    std::optional<int> row, col;
  };
  std::vector<Edit> edits;
  std::vector<HeadRef> ablations;

  bool empty() const { return edits.empty() && ablations.empty(); }

  // (row=last, col=attribute) unless the edit pins positions explicitly
  ResolvedIntervention resolve(const PromptInstance& inst) const;

  static InterventionSpec scale_heads(const std::vector<HeadRef>& heads, float alpha);
  static InterventionSpec ablate(const std::vector<HeadRef>& heads);

  static InterventionSpec from_json_file(const std::string& path);
  std::string to_json() const;
};

struct PairedRates {
  WinRates clean;
  std::vector<WinRates> edited;  // one per requested variant
};

// Clean and edited win rates in one pass: each instance runs once cleanly
// (capturing residuals), then each variant resumes from the first affected
// layer.
PairedRates paired_win_rates(const Dataset& ds, const ModelBundle& model,
                             const std::vector<InterventionSpec>& variants,
                             int workers = 1);

// Eq.-style single-alpha edit on the (last -> attribute) entries of `heads`.
struct AlphaResult {
  WinRates clean;
  WinRates edited;
  float alpha = 1.0f;
};
AlphaResult apply_alpha(const Dataset& ds, const ModelBundle& model,
                        const std::vector<HeadRef>& heads, float alpha,
                        int workers = 1);

struct AblationResult {
  WinRates clean;
  WinRates ablated;
};
AblationResult ablate_heads(const Dataset& ds, const ModelBundle& model,
                            const std::vector<HeadRef>& heads, int workers = 1);

struct GridSearchResult {
  std::vector<float> candidates;
  std::vector<WinRates> rates;  // parallel to candidates
  WinRates clean;
  float alpha_star = 1.0f;  // maximizes fact rate, ties to the smaller alpha
};
GridSearchResult grid_search_alpha(const Dataset& ds, const ModelBundle& model,
                                   const std::vector<HeadRef>& heads,
                                   std::vector<float> candidates = {2, 5, 10, 100},
                                   int workers = 1);

// True when applying the spec leaves every final logit bitwise unchanged on
// every instance (full forward both times, no resume shortcut).
bool verify_noop(const Dataset& ds, const ModelBundle& model,
                 const InterventionSpec& spec, int workers = 1);

// causal attention entries across the model: L * H * len*(len+1)/2
int64_t count_attention_entries(const ModelConfig& cfg, int prompt_len);

}  // namespace mechtrace
