#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mechtrace/embeddings.hpp"
#include "mechtrace/tokenizer.hpp"

namespace mechtrace {

struct CounterFactRecord {
  std::string record_id;
  std::string subject;
  std::string template_text;  // relation template with a "{}" placeholder
  std::string target_true;
  std::string target_new;
};

// JSON paths (dot-separated) into each array element of the source file.
// Defaults match the public CounterFact layout.
struct FieldMap {
  std::string record_id = "case_id";
  std::string subject = "requested_rewrite.subject";
  std::string template_text = "requested_rewrite.prompt";
  std::string target_true = "requested_rewrite.target_true.str";
  std::string target_new = "requested_rewrite.target_new.str";

  static FieldMap from_json_file(const std::string& path);
};

std::vector<CounterFactRecord> load_counterfact(const std::string& path,
                                                const FieldMap& fields = {});

inline constexpr const char* kDefaultPremise = "Redefine:";

// Assembled prompt with byte ranges of the labeled constituents.
struct PromptLayout {
  std::string text;
  size_t sent1_begin = 0, sent1_end = 0;
  size_t sent2_begin = 0, sent2_end = 0;
  size_t subj1_begin = 0, subj1_end = 0;
  size_t attr_begin = 0, attr_end = 0;
  size_t subj2_begin = 0, subj2_end = 0;
};

// "<premise> {s r t_new}. {s r}" with single spaces and no trailing space;
// the separating period is inserted exactly once. Throws SchemaError on a
// malformed template (placeholder count != 1) or empty constituents.
PromptLayout build_prompt_layout(const CounterFactRecord& rec,
                                 const std::string& premise_prefix = kDefaultPremise);
std::string build_prompt(const CounterFactRecord& rec,
                         const std::string& premise_prefix = kDefaultPremise);

// Token-index range [begin, end).
struct TokenRange {
  int begin = 0, end = 0;
  int size() const { return end - begin; }
  bool empty() const { return end <= begin; }
  // span representative for position-grouped aggregation
  int last_token() const { return end - 1; }
};

// Seven contiguous spans partitioning the prompt's token indices, in order.
// Boundary tokens (the separating period, any relation text preceding a
// subject) belong to the span they precede-cut into; subject and attribute
// spans align exactly to their constituents.
struct SpanSet {
  TokenRange premise, subject1, relation1, attribute, subject2, relation2, last;

  static constexpr int kGroups = 7;
  const TokenRange& group(int g) const;
  static const char* group_name(int g);
  static std::optional<int> group_index(const std::string& name);
};

struct PromptInstance {
  std::string record_id;
  std::string text;
  std::vector<int> tokens;
  int t_fact = -1, t_cofa = -1;
  std::string target_true, target_new;  // surface words, no leading space
  SpanSet spans;
  std::optional<float> similarity;
};

// Builds the instance for a record whose targets already passed the
// single-token filter; empty result carries the drop reason.
struct LabelResult {
  std::optional<PromptInstance> instance;
  std::string drop_reason;
};
LabelResult label_instance(const CounterFactRecord& rec, const BpeTokenizer& tok,
                           int t_fact, int t_cofa,
                           const std::string& premise_prefix = kDefaultPremise);

struct FilterStats {
  int64_t records = 0;
  int64_t failed_single_token = 0;
  // sub-counts of the above, non-exclusive: which side of the pair failed
  int64_t failed_single_token_true = 0;
  int64_t failed_single_token_new = 0;
  int64_t equal_targets = 0;
  int64_t failed_factual = 0;
  int64_t failed_span = 0;
  int64_t pool = 0;  // instances surviving every filter, before sampling
  bool truncated = false;
};

struct Provenance {
  std::string source_path, source_sha256, model_sha256;
  uint64_t seed = 0;
  int64_t requested_n = 0;
  std::string premise_prefix = kDefaultPremise;
  std::string tool_version;
  FilterStats stats;
};

struct Dataset {
  std::vector<PromptInstance> instances;
  Provenance provenance;
};

// next-token prediction for the factual screen; wired to greedy_next in
// production, injectable for tests
using GreedyFn = std::function<int(std::span<const int>)>;

// Applies the single-token and factual-recall filters, labels spans, then
// takes a uniform seed-fixed sample of n (the full pool with
// stats.truncated set when the pool is smaller). Deterministic in
// (records, screen results, seed). The factual screen runs in parallel.
Dataset filter_and_sample(const std::vector<CounterFactRecord>& records,
                          const BpeTokenizer& tok, const GreedyFn& greedy,
                          int64_t n, uint64_t seed,
                          const std::string& premise_prefix = kDefaultPremise,
                          int workers = 1,
                          std::vector<std::string>* drop_log = nullptr);

struct SimilarityCounts {
  int64_t scored = 0;
  int64_t oov = 0;
};
SimilarityCounts attach_similarity(Dataset& ds, const EmbeddingTable& emb);

struct SimilarityBin {
  float lo = 0.0f, hi = 0.0f;             // similarity boundaries
  std::vector<int64_t> instance_indices;  // into Dataset::instances
};
struct SimilarityBins {
  std::vector<SimilarityBin> bins;
  int64_t excluded_oov = 0;
};
// Sorts scored instances by ascending similarity and splits them into
// n_bins equal-count bins; any remainder goes to the lowest bins.
SimilarityBins similarity_bins(const Dataset& ds, int n_bins = 10);

void write_dataset(const std::string& path, const Dataset& ds);
Dataset read_dataset(const std::string& path);

}  // namespace mechtrace
