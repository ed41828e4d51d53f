#include "mechtrace/intervention.hpp"

#include <fstream>

#include <json.hpp>

#include "mechtrace/errors.hpp"
#include "mechtrace/parallel.hpp"

namespace mechtrace {

using nlohmann::json;

ResolvedIntervention InterventionSpec::resolve(const PromptInstance& inst) const {
  ResolvedIntervention out;
  const int last = static_cast<int>(inst.tokens.size()) - 1;
  for (const Edit& e : edits) {
    AttentionEdit r;
    r.layer = e.layer;
    r.head = e.head;
    r.alpha = e.alpha;
    r.row = e.row.value_or(last);
    if (e.col) {
      r.col = *e.col;
    } else {
      if (inst.spans.attribute.empty())
        throw NumericError("instance " + inst.record_id + " has no attribute position");
      r.col = inst.spans.attribute.last_token();
    }
    out.edits.push_back(r);
  }
  for (HeadRef h : ablations) out.ablations.push_back({h.layer, h.head});
  return out;
}

InterventionSpec InterventionSpec::scale_heads(const std::vector<HeadRef>& heads,
                                               float alpha) {
  InterventionSpec spec;
  for (HeadRef h : heads) {
    Edit e;
    e.layer = h.layer;
    e.head = h.head;
    e.alpha = alpha;
    spec.edits.push_back(e);
  }
  return spec;
}

InterventionSpec InterventionSpec::ablate(const std::vector<HeadRef>& heads) {
  InterventionSpec spec;
  spec.ablations = heads;
  return spec;
}

InterventionSpec InterventionSpec::from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot open intervention spec: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw SchemaError("intervention spec is not valid JSON: " + std::string(e.what()));
  }
  InterventionSpec spec;
  try {
    for (const json& e : j.value("edits", json::array())) {
      Edit edit;
      edit.layer = e.at("layer").get<int>();
      edit.head = e.at("head").get<int>();
      edit.alpha = e.at("alpha").get<float>();
      if (e.contains("row")) edit.row = e["row"].get<int>();
      if (e.contains("col")) edit.col = e["col"].get<int>();
      if (!(edit.alpha > 0.0f))
        throw SchemaError("intervention spec: alpha must be positive");
      spec.edits.push_back(edit);
    }
    for (const json& a : j.value("ablations", json::array()))
      spec.ablations.push_back({a.at("layer").get<int>(), a.at("head").get<int>()});
  } catch (const json::exception& e) {
    throw SchemaError("intervention spec is malformed: " + std::string(e.what()));
  }
  return spec;
}

std::string InterventionSpec::to_json() const {
  json j;
  j["edits"] = json::array();
  for (const Edit& e : edits) {
    json je = {{"layer", e.layer}, {"head", e.head}, {"alpha", e.alpha}};
    if (e.row) je["row"] = *e.row;
    if (e.col) je["col"] = *e.col;
    j["edits"].push_back(je);
  }
  j["ablations"] = json::array();
  for (HeadRef h : ablations)
    j["ablations"].push_back({{"layer", h.layer}, {"head", h.head}});
  return j.dump(1);
}

PairedRates paired_win_rates(const Dataset& ds, const ModelBundle& model,
                             const std::vector<InterventionSpec>& variants,
                             int workers) {
  const int L = model.config.n_layer;
  struct Slot {
    uint8_t clean_fact = 0;
    std::vector<uint8_t> edited_fact;
  };
  std::vector<Slot> slots(ds.instances.size());

  CaptureSpec capture;
  capture.residuals = true;
  parallel_for(static_cast<int64_t>(ds.instances.size()), workers, [&](int64_t i) {
    const PromptInstance& inst = ds.instances[static_cast<size_t>(i)];
    Slot& slot = slots[static_cast<size_t>(i)];
    HiddenResult clean = forward_hidden_traced(model, inst.tokens, capture);
    const int last = static_cast<int>(inst.tokens.size()) - 1;
    const PairLogits pc = project_pair(model, clean.trace.residual(L).row_span(last),
                                       inst.t_fact, inst.t_cofa, true);
    slot.clean_fact = pc.fact > pc.cofa ? 1 : 0;
    slot.edited_fact.resize(variants.size());
    for (size_t v = 0; v < variants.size(); ++v) {
      const ResolvedIntervention iv = variants[v].resolve(inst);
      if (iv.empty()) {
        slot.edited_fact[v] = slot.clean_fact;
        continue;
      }
      const int start = iv.min_affected_layer(L);
      HiddenResult edited = forward_hidden_from(model, clean.trace, start, {}, &iv);
      const PairLogits pe = project_pair(
          model, edited.hidden.row_span(edited.hidden.dim(0) - 1), inst.t_fact,
          inst.t_cofa, true);
      slot.edited_fact[v] = pe.fact > pe.cofa ? 1 : 0;
    }
  });

  PairedRates out;
  out.clean.n = static_cast<int64_t>(ds.instances.size());
  out.edited.resize(variants.size());
  for (auto& e : out.edited) e.n = out.clean.n;
  for (const Slot& slot : slots) {
    out.clean.fact_wins += slot.clean_fact;
    for (size_t v = 0; v < variants.size(); ++v)
      out.edited[v].fact_wins += slot.edited_fact[v];
  }
  return out;
}

AlphaResult apply_alpha(const Dataset& ds, const ModelBundle& model,
                        const std::vector<HeadRef>& heads, float alpha, int workers) {
  if (!(alpha > 0.0f)) throw NumericError("alpha must be positive");
  for (HeadRef h : heads)
    if (h.layer < 0 || h.layer >= model.config.n_layer || h.head < 0 ||
        h.head >= model.config.n_head)
      throw NumericError("unknown head " + h.str());
  PairedRates rates =
      paired_win_rates(ds, model, {InterventionSpec::scale_heads(heads, alpha)}, workers);
  return {rates.clean, rates.edited[0], alpha};
}

AblationResult ablate_heads(const Dataset& ds, const ModelBundle& model,
                            const std::vector<HeadRef>& heads, int workers) {
  for (HeadRef h : heads)
    if (h.layer < 0 || h.layer >= model.config.n_layer || h.head < 0 ||
        h.head >= model.config.n_head)
      throw NumericError("unknown head " + h.str());
  PairedRates rates =
      paired_win_rates(ds, model, {InterventionSpec::ablate(heads)}, workers);
  return {rates.clean, rates.edited[0]};
}

GridSearchResult grid_search_alpha(const Dataset& ds, const ModelBundle& model,
                                   const std::vector<HeadRef>& heads,
                                   std::vector<float> candidates, int workers) {
  if (candidates.size() < 1) throw NumericError("grid search needs at least one candidate");
  std::vector<InterventionSpec> variants;
  variants.reserve(candidates.size());
  for (float a : candidates) {
    if (!(a > 0.0f)) throw NumericError("alpha candidates must be positive");
    variants.push_back(InterventionSpec::scale_heads(heads, a));
  }
  PairedRates rates = paired_win_rates(ds, model, variants, workers);

  GridSearchResult out;
  out.candidates = std::move(candidates);
  out.rates = rates.edited;
  out.clean = rates.clean;
  size_t best = 0;
  for (size_t i = 1; i < out.rates.size(); ++i) {
    const bool better = out.rates[i].fact_wins > out.rates[best].fact_wins;
    const bool tie_smaller = out.rates[i].fact_wins == out.rates[best].fact_wins &&
                             out.candidates[i] < out.candidates[best];
    if (better || tie_smaller) best = i;
  }
  out.alpha_star = out.candidates[best];
  return out;
}

bool verify_noop(const Dataset& ds, const ModelBundle& model,
                 const InterventionSpec& spec, int workers) {
  std::vector<uint8_t> same(ds.instances.size(), 0);
  parallel_for(static_cast<int64_t>(ds.instances.size()), workers, [&](int64_t i) {
    const PromptInstance& inst = ds.instances[static_cast<size_t>(i)];
    const ResolvedIntervention iv = spec.resolve(inst);
    ForwardResult clean = forward(model, inst.tokens);
    ForwardResult edited = forward(model, inst.tokens, {}, &iv);
    same[static_cast<size_t>(i)] =
        clean.logits.data == edited.logits.data ? 1 : 0;
  });
  for (uint8_t s : same)
    if (!s) return false;
  return true;
}

int64_t count_attention_entries(const ModelConfig& cfg, int prompt_len) {
  if (prompt_len < 1) throw NumericError("prompt length must be >= 1");
  const int64_t tri = static_cast<int64_t>(prompt_len) * (prompt_len + 1) / 2;
  return static_cast<int64_t>(cfg.n_layer) * cfg.n_head * tri;
}

}  // namespace mechtrace
