#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mechtrace/tensor.hpp"

namespace mechtrace {

struct ModelConfig {
  int n_layer = 12;
  int n_head = 12;
  int d_model = 768;
  int vocab_size = 50257;
  int n_ctx = 1024;
  float ln_eps = 1e-5f;

  int d_head() const { return d_model / n_head; }
  void validate() const;

  static ModelConfig gpt2_small() { return ModelConfig{}; }
  static ModelConfig from_json_file(const std::string& path);
};

struct LayerNormParams {
  Tensor gain, bias;  // [d]
};

struct AttnParams {
  Tensor wq, wk, wv;  // [d, d]
  Tensor bq, bk, bv;  // [d]
  Tensor wo;          // [d, d]
  Tensor bo;          // [d]
};

struct MlpParams {
  Tensor w_in;   // [d, 4d]
  Tensor b_in;   // [4d]
  Tensor w_out;  // [4d, d]
  Tensor b_out;  // [d]
};

struct LayerParams {
  LayerNormParams ln1, ln2;
  AttnParams attn;
  MlpParams mlp;
};

// Immutable after load; shareable across threads. Forward calls own all
// their scratch state.
struct ModelBundle {
  ModelConfig config;
  Tensor wte;  // [V, d] token embedding; rows double as the unembedding
  Tensor wpe;  // [ctx, d]
  std::vector<LayerParams> layers;
  LayerNormParams ln_f;
  Tensor lm_head;  // [V, d]; empty when tied to wte

  // unembedding rows: row v projects a hidden state onto token v's logit
  const Tensor& unembedding() const { return lm_head.numel() ? lm_head : wte; }
  bool tied_unembedding() const { return lm_head.numel() == 0; }
  int64_t parameter_count() const;
};

// Head coordinate, printed as LxHy.
struct HeadRef {
  int layer = 0, head = 0;
  bool operator==(const HeadRef&) const = default;
  std::string str() const {
    return "L" + std::to_string(layer) + "H" + std::to_string(head);
  }
};
// parses "L10H7"; throws on malformed input
HeadRef parse_head_ref(const std::string& s);
std::vector<HeadRef> parse_head_list(const std::string& comma_separated);

// Post-softmax scale of one attention entry: A[row, col] *= alpha.
struct AttentionEdit {
  int layer = 0, head = 0;
  int row = 0, col = 0;
  float alpha = 1.0f;
};

// Zeroes the head's contribution to the attention block output (its slice
// of the output projection), before the output bias is added.
struct HeadAblation {
  int layer = 0, head = 0;
};

struct ResolvedIntervention {
  std::vector<AttentionEdit> edits;
  std::vector<HeadAblation> ablations;

  bool empty() const { return edits.empty() && ablations.empty(); }
  int min_affected_layer(int n_layer) const;
  void validate(const ModelConfig& cfg, int seq_len) const;
};

// Which trace fields forward() records; everything defaults off so plain
// runs carry no capture cost.
struct CaptureSpec {
  bool residuals = false;          // x^0 .. x^L, all positions
  bool block_outputs = false;      // a^l, m^l
  bool block_outputs_full = false; // all positions instead of last only
  bool head_outputs = false;       // a^{h,l} through the head's W_O slice
  bool head_outputs_full = false;
  bool attention = false;          // post-softmax A^{hl}, causal-masked

  bool any() const {
    return residuals || block_outputs || head_outputs || attention;
  }
  static CaptureSpec all() {
    return {true, true, true, true, true, true};
  }
};

struct TraceRecord {
  int seq_len = 0;
  CaptureSpec captured;
  // residuals[l] is x^l, shape [k, d]; residuals[0] is the embedding stream
  std::vector<Tensor> residuals;
  // per layer; [k, d] when block_outputs_full else [1, d] (last position)
  std::vector<Tensor> attn_out, mlp_out;
  // per layer; [H, k, d] when head_outputs_full else [H, 1, d]
  std::vector<Tensor> head_out;
  // per layer; [H, k, k]
  std::vector<Tensor> attention;

  const Tensor& residual(int layer) const;
  // a^l / m^l / a^{h,l} at a position (must have been captured)
  std::span<const float> attn_at(int layer, int pos) const;
  std::span<const float> mlp_at(int layer, int pos) const;
  std::span<const float> head_at(int layer, int head, int pos) const;
  float attention_value(int layer, int head, int row, int col) const;
};

struct ForwardResult {
  Tensor logits;  // [k, V]
  TraceRecord trace;
};

// Full forward pass over all positions. Captures per `capture`; applies
// `edits` when given.
ForwardResult forward(const ModelBundle& model, std::span<const int> tokens,
                      const CaptureSpec& capture = {},
                      const ResolvedIntervention* edits = nullptr);

// Re-runs layers [start_layer, L) from the captured residual x^{start_layer}
// of a clean run. Logits cover all positions.
ForwardResult forward_from(const ModelBundle& model, const TraceRecord& clean,
                           int start_layer, const CaptureSpec& capture = {},
                           const ResolvedIntervention* edits = nullptr);

// Same passes without the full-vocabulary projection; the residual stream
// x^L comes back with the trace. The cheap path for analyses that project
// only a handful of logits afterwards.
struct HiddenResult {
  Tensor hidden;  // [k, d]
  TraceRecord trace;
};
HiddenResult forward_hidden_traced(const ModelBundle& model, std::span<const int> tokens,
                                   const CaptureSpec& capture,
                                   const ResolvedIntervention* edits = nullptr);
HiddenResult forward_hidden_from(const ModelBundle& model, const TraceRecord& clean,
                                 int start_layer, const CaptureSpec& capture = {},
                                 const ResolvedIntervention* edits = nullptr);

// Final residual stream x^L without the vocabulary projection; the cheap
// path when only a handful of logits are needed afterwards.
Tensor forward_hidden(const ModelBundle& model, std::span<const int> tokens,
                      const ResolvedIntervention* edits = nullptr);

// argmax of final-position logits; ties resolve to the lowest token id
int greedy_next(const ModelBundle& model, std::span<const int> tokens);

// final-layernorm + unembedding applied to one hidden row
void project_to_vocab(const ModelBundle& model, std::span<const float> hidden,
                      std::span<float> logits_out, bool apply_final_norm = true);

// logits of two tokens from one hidden row, with or without ln_f
struct PairLogits {
  float fact = 0.0f, cofa = 0.0f;
};
PairLogits project_pair(const ModelBundle& model, std::span<const float> hidden,
                        int t_fact, int t_cofa, bool apply_final_norm);

// --- container I/O ----------------------------------------------------------

// Loads a GPT-2-family checkpoint from a safetensors archive. Accepts the
// published tensor names with or without the "transformer." prefix; the
// fused c_attn projection is split into per-matrix Q/K/V. Fails with the
// offending tensor name on any missing tensor or shape mismatch.
ModelBundle load_model(const std::string& weights_path, const ModelConfig& cfg);

// Writes the bundle back out using the same published names (unprefixed).
void save_model(const std::string& path, const ModelBundle& model);

}  // namespace mechtrace
