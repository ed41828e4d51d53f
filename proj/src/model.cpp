#include "mechtrace/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "mechtrace/kernels.hpp"
#include "mechtrace/safetensors.hpp"

namespace mechtrace {

void ModelConfig::validate() const {
  if (n_layer < 1 || n_head < 1 || d_model < 1 || vocab_size < 1 || n_ctx < 1)
    throw SchemaError("model config has non-positive dimensions");
  if (d_model % n_head != 0)
    throw SchemaError("d_model " + std::to_string(d_model) +
                      " not divisible by n_head " + std::to_string(n_head));
  if (!(ln_eps > 0.0f)) throw SchemaError("layernorm eps must be positive");
}

ModelConfig ModelConfig::from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot open model config: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("model config is not valid JSON: " + std::string(e.what()));
  }
  ModelConfig cfg;
  try {
    cfg.n_layer = j.at("n_layer").get<int>();
    cfg.n_head = j.at("n_head").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.n_ctx = j.at("n_ctx").get<int>();
    cfg.ln_eps = j.value("ln_eps", 1e-5f);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("model config missing field: " + std::string(e.what()));
  }
  cfg.validate();
  return cfg;
}

int64_t ModelBundle::parameter_count() const {
  int64_t n = wte.numel() + wpe.numel() + ln_f.gain.numel() + ln_f.bias.numel();
  for (const auto& l : layers) {
    n += l.ln1.gain.numel() + l.ln1.bias.numel();
    n += l.ln2.gain.numel() + l.ln2.bias.numel();
    n += l.attn.wq.numel() + l.attn.wk.numel() + l.attn.wv.numel();
    n += l.attn.bq.numel() + l.attn.bk.numel() + l.attn.bv.numel();
    n += l.attn.wo.numel() + l.attn.bo.numel();
    n += l.mlp.w_in.numel() + l.mlp.b_in.numel();
    n += l.mlp.w_out.numel() + l.mlp.b_out.numel();
  }
  n += lm_head.numel();
  return n;
}

HeadRef parse_head_ref(const std::string& s) {
  if (s.size() >= 4 && (s[0] == 'L' || s[0] == 'l')) {
    const size_t hpos = s.find_first_of("Hh", 1);
    if (hpos != std::string::npos && hpos > 1 && hpos + 1 < s.size()) {
      try {
        const int layer = std::stoi(s.substr(1, hpos - 1));
        const int head = std::stoi(s.substr(hpos + 1));
        return {layer, head};
      } catch (const std::exception&) {
      }
    }
  }
  throw InputError("cannot parse head reference '" + s + "' (expected LxHy)");
}

std::vector<HeadRef> parse_head_list(const std::string& comma_separated) {
  std::vector<HeadRef> out;
  size_t pos = 0;
  while (pos <= comma_separated.size()) {
    const size_t comma = comma_separated.find(',', pos);
    const std::string piece =
        comma_separated.substr(pos, comma == std::string::npos ? comma : comma - pos);
    if (!piece.empty()) out.push_back(parse_head_ref(piece));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

int ResolvedIntervention::min_affected_layer(int n_layer) const {
  int lo = n_layer;
  for (const auto& e : edits) lo = std::min(lo, e.layer);
  for (const auto& a : ablations) lo = std::min(lo, a.layer);
  return lo;
}

void ResolvedIntervention::validate(const ModelConfig& cfg, int seq_len) const {
  for (const auto& e : edits) {
    if (e.layer < 0 || e.layer >= cfg.n_layer || e.head < 0 || e.head >= cfg.n_head)
      throw NumericError("attention edit targets out-of-range layer/head L" +
                         std::to_string(e.layer) + "H" + std::to_string(e.head));
    if (e.row < 0 || e.row >= seq_len || e.col < 0 || e.col >= seq_len)
      throw NumericError("attention edit position (" + std::to_string(e.row) + "," +
                         std::to_string(e.col) + ") out of range for length " +
                         std::to_string(seq_len));
    if (e.col >= e.row)
      throw NumericError("attention edit targets a non-causal entry (col " +
                         std::to_string(e.col) + " >= row " + std::to_string(e.row) + ")");
    if (!(e.alpha > 0.0f))
      throw NumericError("attention edit multiplier must be positive");
  }
  for (size_t i = 0; i < edits.size(); ++i)
    for (size_t j = i + 1; j < edits.size(); ++j) {
      const auto &a = edits[i], &b = edits[j];
      if (a.layer == b.layer && a.head == b.head && a.row == b.row && a.col == b.col)
        throw NumericError("duplicate attention edit at L" + std::to_string(a.layer) +
                           "H" + std::to_string(a.head));
    }
  for (const auto& a : ablations)
    if (a.layer < 0 || a.layer >= cfg.n_layer || a.head < 0 || a.head >= cfg.n_head)
      throw NumericError("ablation targets unknown head L" + std::to_string(a.layer) +
                         "H" + std::to_string(a.head));
}

const Tensor& TraceRecord::residual(int layer) const {
  if (!captured.residuals || layer < 0 || layer >= static_cast<int>(residuals.size()) ||
      residuals[static_cast<size_t>(layer)].numel() == 0)
    throw SchemaError("residual stream at layer " + std::to_string(layer) +
                      " was not captured");
  return residuals[static_cast<size_t>(layer)];
}

namespace {

std::span<const float> block_row(const std::vector<Tensor>& per_layer, bool full,
                                 int layer, int pos, int seq_len, const char* what) {
  if (layer < 0 || layer >= static_cast<int>(per_layer.size()) ||
      per_layer[static_cast<size_t>(layer)].numel() == 0)
    throw SchemaError(std::string(what) + " at layer " + std::to_string(layer) +
                      " was not captured");
  const Tensor& t = per_layer[static_cast<size_t>(layer)];
  if (full) return t.row_span(pos);
  if (pos != seq_len - 1)
    throw SchemaError(std::string(what) + " captured at the last position only");
  return t.row_span(0);
}

}  // namespace

std::span<const float> TraceRecord::attn_at(int layer, int pos) const {
  if (!captured.block_outputs) throw SchemaError("block outputs were not captured");
  return block_row(attn_out, captured.block_outputs_full, layer, pos, seq_len,
                   "attention block output");
}

std::span<const float> TraceRecord::mlp_at(int layer, int pos) const {
  if (!captured.block_outputs) throw SchemaError("block outputs were not captured");
  return block_row(mlp_out, captured.block_outputs_full, layer, pos, seq_len,
                   "MLP block output");
}

std::span<const float> TraceRecord::head_at(int layer, int head, int pos) const {
  if (!captured.head_outputs) throw SchemaError("per-head outputs were not captured");
  if (layer < 0 || layer >= static_cast<int>(head_out.size()) ||
      head_out[static_cast<size_t>(layer)].numel() == 0)
    throw SchemaError("per-head outputs at layer " + std::to_string(layer) +
                      " were not captured");
  const Tensor& t = head_out[static_cast<size_t>(layer)];
  const int64_t positions = t.dim(1), d = t.dim(2);
  int64_t p = pos;
  if (!captured.head_outputs_full) {
    if (pos != seq_len - 1)
      throw SchemaError("per-head outputs captured at the last position only");
    p = 0;
  }
  return {t.data.data() + (head * positions + p) * d, static_cast<size_t>(d)};
}

float TraceRecord::attention_value(int layer, int head, int row, int col) const {
  if (!captured.attention || layer < 0 ||
      layer >= static_cast<int>(attention.size()) ||
      attention[static_cast<size_t>(layer)].numel() == 0)
    throw SchemaError("attention matrices at layer " + std::to_string(layer) +
                      " were not captured");
  const Tensor& t = attention[static_cast<size_t>(layer)];
  const int64_t k = t.dim(1);
  return t.data[static_cast<size_t>((head * k + row) * k + col)];
}

namespace {

void add_row_bias(Tensor& x, const Tensor& bias) {
  const int64_t rows = x.rows(), n = x.row_size();
  for (int64_t r = 0; r < rows; ++r) {
    float* p = x.row(r);
    for (int64_t j = 0; j < n; ++j) p[j] += bias.data[static_cast<size_t>(j)];
  }
}

struct LayerScratch {
  Tensor att;  // [H, k, k]
  Tensor ctx;  // [k, d] concatenated head contexts
};

// one transformer layer, in place on x; returns what the capture asked for
void layer_forward(const ModelBundle& model, int l, Tensor& x,
                   const CaptureSpec& capture, const ResolvedIntervention* iv,
                   TraceRecord& trace, LayerScratch& scratch) {
  const auto& cfg = model.config;
  const auto& L = model.layers[static_cast<size_t>(l)];
  const int64_t k = x.dim(0), d = cfg.d_model;
  const int H = cfg.n_head, dh = cfg.d_head();
  const float scale = std::sqrt(static_cast<float>(dh));

  Tensor ln1x = layernorm(x, L.ln1.gain, L.ln1.bias, cfg.ln_eps);
  Tensor q = matmul(ln1x, L.attn.wq);
  add_row_bias(q, L.attn.bq);
  Tensor kk = matmul(ln1x, L.attn.wk);
  add_row_bias(kk, L.attn.bk);
  Tensor v = matmul(ln1x, L.attn.wv);
  add_row_bias(v, L.attn.bv);

  Tensor& att = scratch.att;
  att = Tensor::zeros({H, k, k});
  const float neg_inf = -std::numeric_limits<float>::infinity();
  for (int h = 0; h < H; ++h) {
    float* ah = att.data.data() + static_cast<int64_t>(h) * k * k;
    for (int64_t i = 0; i < k; ++i) {
      const float* qi = q.row(i) + h * dh;
      float* row = ah + i * k;
      for (int64_t j = 0; j <= i; ++j)
        row[j] = dot({qi, static_cast<size_t>(dh)},
                     {kk.row(j) + h * dh, static_cast<size_t>(dh)}) /
                 scale;
      for (int64_t j = i + 1; j < k; ++j) row[j] = neg_inf;
      softmax_row_inplace(row, k);
    }
  }

  if (iv)
    for (const auto& e : iv->edits)
      if (e.layer == l)
        att.data[static_cast<size_t>((static_cast<int64_t>(e.head) * k + e.row) * k +
                                     e.col)] *= e.alpha;

  if (capture.attention) trace.attention[static_cast<size_t>(l)] = att;

  // per-head weighted values, concatenated into [k, d]
  Tensor& ctx = scratch.ctx;
  ctx = Tensor::zeros({k, d});
  for (int h = 0; h < H; ++h) {
    bool ablated = false;
    if (iv)
      for (const auto& a : iv->ablations)
        if (a.layer == l && a.head == h) ablated = true;
    if (ablated) continue;  // zero contribution
    const float* ah = att.data.data() + static_cast<int64_t>(h) * k * k;
    for (int64_t i = 0; i < k; ++i) {
      float* out = ctx.row(i) + h * dh;
      const float* arow = ah + i * k;
      for (int64_t j = 0; j <= i; ++j)
        axpy(arow[j], {v.row(j) + h * dh, static_cast<size_t>(dh)},
             {out, static_cast<size_t>(dh)});
    }
  }

  Tensor attn_out = matmul(ctx, L.attn.wo);
  add_row_bias(attn_out, L.attn.bo);

  if (capture.head_outputs) {
    const int64_t positions = capture.head_outputs_full ? k : 1;
    Tensor ho = Tensor::zeros({H, positions, d});
    for (int h = 0; h < H; ++h) {
      for (int64_t p = 0; p < positions; ++p) {
        const int64_t i = capture.head_outputs_full ? p : k - 1;
        // a^{h,l}_i = ctx_h(i) through the head's row block of W_O
        const float* c = ctx.row(i) + h * dh;
        float* out = ho.data.data() + (static_cast<int64_t>(h) * positions + p) * d;
        for (int dd = 0; dd < dh; ++dd)
          axpy(c[dd], {L.attn.wo.row(h * dh + dd), static_cast<size_t>(d)},
               {out, static_cast<size_t>(d)});
      }
    }
    trace.head_out[static_cast<size_t>(l)] = std::move(ho);
  }

  if (capture.block_outputs) {
    if (capture.block_outputs_full) {
      trace.attn_out[static_cast<size_t>(l)] = attn_out;
    } else {
      Tensor last = Tensor::zeros({1, d});
      std::memcpy(last.row(0), attn_out.row(k - 1), sizeof(float) * static_cast<size_t>(d));
      trace.attn_out[static_cast<size_t>(l)] = std::move(last);
    }
  }

  // x_mid = x + a^l
  add_inplace({x.data.data(), x.data.size()}, {attn_out.data.data(), attn_out.data.size()});

  Tensor ln2x = layernorm(x, L.ln2.gain, L.ln2.bias, cfg.ln_eps);
  Tensor h1 = matmul(ln2x, L.mlp.w_in);
  add_row_bias(h1, L.mlp.b_in);
  for (float& val : h1.data) val = gelu_scalar(val);
  Tensor mlp_out = matmul(h1, L.mlp.w_out);
  add_row_bias(mlp_out, L.mlp.b_out);

  if (capture.block_outputs) {
    if (capture.block_outputs_full) {
      trace.mlp_out[static_cast<size_t>(l)] = mlp_out;
    } else {
      Tensor last = Tensor::zeros({1, d});
      std::memcpy(last.row(0), mlp_out.row(k - 1), sizeof(float) * static_cast<size_t>(d));
      trace.mlp_out[static_cast<size_t>(l)] = std::move(last);
    }
  }

  add_inplace({x.data.data(), x.data.size()}, {mlp_out.data.data(), mlp_out.data.size()});

  if (capture.residuals) trace.residuals[static_cast<size_t>(l) + 1] = x;
}

TraceRecord make_trace(const ModelConfig& cfg, int seq_len, const CaptureSpec& capture) {
  TraceRecord t;
  t.seq_len = seq_len;
  t.captured = capture;
  t.residuals.resize(static_cast<size_t>(cfg.n_layer) + 1);
  t.attn_out.resize(static_cast<size_t>(cfg.n_layer));
  t.mlp_out.resize(static_cast<size_t>(cfg.n_layer));
  t.head_out.resize(static_cast<size_t>(cfg.n_layer));
  t.attention.resize(static_cast<size_t>(cfg.n_layer));
  return t;
}

// runs layers [start_layer, L); returns the final residual stream
Tensor run_layers(const ModelBundle& model, Tensor x, int start_layer,
                  const CaptureSpec& capture, const ResolvedIntervention* iv,
                  TraceRecord& trace) {
  LayerScratch scratch;
  for (int l = start_layer; l < model.config.n_layer; ++l)
    layer_forward(model, l, x, capture, iv, trace, scratch);
  return x;
}

Tensor embed(const ModelBundle& model, std::span<const int> tokens) {
  const auto& cfg = model.config;
  const int k = static_cast<int>(tokens.size());
  Tensor x = Tensor::zeros({k, cfg.d_model});
  for (int i = 0; i < k; ++i) {
    const float* e = model.wte.row(tokens[static_cast<size_t>(i)]);
    const float* p = model.wpe.row(i);
    float* xi = x.row(i);
    for (int j = 0; j < cfg.d_model; ++j) xi[j] = e[j] + p[j];
  }
  return x;
}

void check_forward_args(const ModelBundle& model, std::span<const int> tokens) {
  const auto& cfg = model.config;
  const int k = static_cast<int>(tokens.size());
  if (k < 1) throw NumericError("forward needs at least one token");
  if (k > cfg.n_ctx)
    throw NumericError("prompt length " + std::to_string(k) +
                       " exceeds context length " + std::to_string(cfg.n_ctx));
  for (int id : tokens)
    if (id < 0 || id >= cfg.vocab_size)
      throw NumericError("token id " + std::to_string(id) + " out of range for vocab " +
                         std::to_string(cfg.vocab_size));
}

}  // namespace

HiddenResult forward_hidden_traced(const ModelBundle& model, std::span<const int> tokens,
                                   const CaptureSpec& capture,
                                   const ResolvedIntervention* iv) {
  const auto& cfg = model.config;
  check_forward_args(model, tokens);
  const int k = static_cast<int>(tokens.size());
  if (iv) iv->validate(cfg, k);

  Tensor x = embed(model, tokens);
  HiddenResult res;
  res.trace = make_trace(cfg, k, capture);
  if (capture.residuals) res.trace.residuals[0] = x;
  res.hidden = run_layers(model, std::move(x), 0, capture, iv, res.trace);
  return res;
}

HiddenResult forward_hidden_from(const ModelBundle& model, const TraceRecord& clean,
                                 int start_layer, const CaptureSpec& capture,
                                 const ResolvedIntervention* iv) {
  const auto& cfg = model.config;
  if (start_layer < 0 || start_layer > cfg.n_layer)
    throw NumericError("start layer out of range");
  const Tensor& x0 = clean.residual(start_layer);
  if (iv) iv->validate(cfg, clean.seq_len);
  if (iv && iv->min_affected_layer(cfg.n_layer) < start_layer)
    throw NumericError("intervention edits a layer before the resume point");
  HiddenResult res;
  res.trace = make_trace(cfg, clean.seq_len, capture);
  if (capture.residuals)
    for (int l = 0; l <= start_layer; ++l)
      res.trace.residuals[static_cast<size_t>(l)] = clean.residuals[static_cast<size_t>(l)];
  res.hidden = run_layers(model, x0, start_layer, capture, iv, res.trace);
  return res;
}

namespace {

ForwardResult project_full(const ModelBundle& model, HiddenResult hr) {
  ForwardResult res;
  Tensor lnf = layernorm(hr.hidden, model.ln_f.gain, model.ln_f.bias, model.config.ln_eps);
  res.logits = matmul_nt(lnf, model.unembedding());
  res.trace = std::move(hr.trace);
  return res;
}

}  // namespace

ForwardResult forward(const ModelBundle& model, std::span<const int> tokens,
                      const CaptureSpec& capture, const ResolvedIntervention* iv) {
  return project_full(model, forward_hidden_traced(model, tokens, capture, iv));
}

ForwardResult forward_from(const ModelBundle& model, const TraceRecord& clean,
                           int start_layer, const CaptureSpec& capture,
                           const ResolvedIntervention* iv) {
  return project_full(model, forward_hidden_from(model, clean, start_layer, capture, iv));
}

// final residual stream only; no vocabulary projection
Tensor forward_hidden(const ModelBundle& model, std::span<const int> tokens,
                      const ResolvedIntervention* iv) {
  return forward_hidden_traced(model, tokens, {}, iv).hidden;
}

void project_to_vocab(const ModelBundle& model, std::span<const float> hidden,
                      std::span<float> logits_out, bool apply_final_norm) {
  const auto& cfg = model.config;
  Tensor row = Tensor::zeros({1, cfg.d_model});
  if (apply_final_norm)
    layernorm_row(hidden.data(), row.row(0), model.ln_f.gain.data.data(),
                  model.ln_f.bias.data.data(), cfg.d_model, cfg.ln_eps);
  else
    std::memcpy(row.row(0), hidden.data(), sizeof(float) * hidden.size());
  Tensor logits = matmul_nt(row, model.unembedding());
  std::memcpy(logits_out.data(), logits.data.data(),
              sizeof(float) * static_cast<size_t>(cfg.vocab_size));
}

PairLogits project_pair(const ModelBundle& model, std::span<const float> hidden,
                        int t_fact, int t_cofa, bool apply_final_norm) {
  const auto& cfg = model.config;
  std::vector<float> buf;
  std::span<const float> h = hidden;
  if (apply_final_norm) {
    buf.resize(static_cast<size_t>(cfg.d_model));
    layernorm_row(hidden.data(), buf.data(), model.ln_f.gain.data.data(),
                  model.ln_f.bias.data.data(), cfg.d_model, cfg.ln_eps);
    h = buf;
  }
  const Tensor& u = model.unembedding();
  PairLogits out;
  out.fact = dot(h, u.row_span(t_fact));
  out.cofa = dot(h, u.row_span(t_cofa));
  return out;
}

int greedy_next(const ModelBundle& model, std::span<const int> tokens) {
  Tensor x = forward_hidden(model, tokens, nullptr);
  std::vector<float> logits(static_cast<size_t>(model.config.vocab_size));
  project_to_vocab(model, x.row_span(x.dim(0) - 1), logits);
  return static_cast<int>(argmax_lowest(logits));
}

// --- container I/O ----------------------------------------------------------

namespace {

Tensor load_checked(const SafeTensors& st, const std::string& prefix,
                    const std::string& name, const std::vector<int64_t>& want) {
  Tensor t = st.load(prefix + name);
  if (t.shape != want) {
    Tensor expect = Tensor::zeros(want);
    throw SchemaError("tensor '" + name + "' has shape " + t.shape_str() +
                      ", expected " + expect.shape_str());
  }
  return t;
}

void split_columns(const Tensor& fused, int64_t col0, int64_t cols, Tensor& out) {
  const int64_t rows = fused.dim(0), width = fused.dim(1);
  out = Tensor::zeros({rows, cols});
  for (int64_t r = 0; r < rows; ++r)
    std::memcpy(out.row(r), fused.row(r) + col0, sizeof(float) * static_cast<size_t>(cols));
  (void)width;
}

Tensor slice_vec(const Tensor& fused, int64_t from, int64_t n) {
  Tensor out = Tensor::zeros({n});
  std::memcpy(out.data.data(), fused.data.data() + from, sizeof(float) * static_cast<size_t>(n));
  return out;
}

}  // namespace

ModelBundle load_model(const std::string& weights_path, const ModelConfig& cfg) {
  cfg.validate();
  SafeTensors st = SafeTensors::open(weights_path);
  const std::string prefix = st.contains("wte.weight") ? "" : "transformer.";
  if (!st.contains(prefix + "wte.weight"))
    throw SchemaError("tensor archive has no 'wte.weight' (with or without the "
                      "'transformer.' prefix): " + weights_path);

  const int64_t d = cfg.d_model, V = cfg.vocab_size, ctx = cfg.n_ctx;
  ModelBundle m;
  m.config = cfg;
  m.wte = load_checked(st, prefix, "wte.weight", {V, d});
  m.wpe = load_checked(st, prefix, "wpe.weight", {ctx, d});
  m.layers.resize(static_cast<size_t>(cfg.n_layer));
  for (int l = 0; l < cfg.n_layer; ++l) {
    const std::string h = "h." + std::to_string(l) + ".";
    auto& L = m.layers[static_cast<size_t>(l)];
    L.ln1.gain = load_checked(st, prefix, h + "ln_1.weight", {d});
    L.ln1.bias = load_checked(st, prefix, h + "ln_1.bias", {d});
    L.ln2.gain = load_checked(st, prefix, h + "ln_2.weight", {d});
    L.ln2.bias = load_checked(st, prefix, h + "ln_2.bias", {d});

    Tensor c_attn_w = load_checked(st, prefix, h + "attn.c_attn.weight", {d, 3 * d});
    Tensor c_attn_b = load_checked(st, prefix, h + "attn.c_attn.bias", {3 * d});
    split_columns(c_attn_w, 0, d, L.attn.wq);
    split_columns(c_attn_w, d, d, L.attn.wk);
    split_columns(c_attn_w, 2 * d, d, L.attn.wv);
    L.attn.bq = slice_vec(c_attn_b, 0, d);
    L.attn.bk = slice_vec(c_attn_b, d, d);
    L.attn.bv = slice_vec(c_attn_b, 2 * d, d);
    L.attn.wo = load_checked(st, prefix, h + "attn.c_proj.weight", {d, d});
    L.attn.bo = load_checked(st, prefix, h + "attn.c_proj.bias", {d});

    L.mlp.w_in = load_checked(st, prefix, h + "mlp.c_fc.weight", {d, 4 * d});
    L.mlp.b_in = load_checked(st, prefix, h + "mlp.c_fc.bias", {4 * d});
    L.mlp.w_out = load_checked(st, prefix, h + "mlp.c_proj.weight", {4 * d, d});
    L.mlp.b_out = load_checked(st, prefix, h + "mlp.c_proj.bias", {d});
  }
  m.ln_f.gain = load_checked(st, prefix, "ln_f.weight", {d});
  m.ln_f.bias = load_checked(st, prefix, "ln_f.bias", {d});

  // untied unembedding only when the checkpoint carries a separate lm_head
  if (st.contains(prefix + "lm_head.weight") || st.contains("lm_head.weight")) {
    const std::string key =
        st.contains("lm_head.weight") ? "lm_head.weight" : prefix + "lm_head.weight";
    Tensor head = st.load(key);
    if (head.shape != std::vector<int64_t>{V, d})
      throw SchemaError("lm_head.weight has shape " + head.shape_str());
    if (head.data != m.wte.data) m.lm_head = std::move(head);
  }
  return m;
}

void save_model(const std::string& path, const ModelBundle& m) {
  const int64_t d = m.config.d_model;
  std::vector<Tensor> fused_w(m.layers.size()), fused_b(m.layers.size());
  for (size_t l = 0; l < m.layers.size(); ++l) {
    const auto& a = m.layers[l].attn;
    Tensor& w = fused_w[l];
    w = Tensor::zeros({d, 3 * d});
    for (int64_t r = 0; r < d; ++r) {
      std::memcpy(w.row(r), a.wq.row(r), sizeof(float) * static_cast<size_t>(d));
      std::memcpy(w.row(r) + d, a.wk.row(r), sizeof(float) * static_cast<size_t>(d));
      std::memcpy(w.row(r) + 2 * d, a.wv.row(r), sizeof(float) * static_cast<size_t>(d));
    }
    Tensor& b = fused_b[l];
    b = Tensor::zeros({3 * d});
    std::memcpy(b.data.data(), a.bq.data.data(), sizeof(float) * static_cast<size_t>(d));
    std::memcpy(b.data.data() + d, a.bk.data.data(), sizeof(float) * static_cast<size_t>(d));
    std::memcpy(b.data.data() + 2 * d, a.bv.data.data(), sizeof(float) * static_cast<size_t>(d));
  }

  std::vector<std::pair<std::string, const Tensor*>> out;
  out.emplace_back("wte.weight", &m.wte);
  out.emplace_back("wpe.weight", &m.wpe);
  for (size_t l = 0; l < m.layers.size(); ++l) {
    const std::string h = "h." + std::to_string(l) + ".";
    const auto& L = m.layers[l];
    out.emplace_back(h + "ln_1.weight", &L.ln1.gain);
    out.emplace_back(h + "ln_1.bias", &L.ln1.bias);
    out.emplace_back(h + "attn.c_attn.weight", &fused_w[l]);
    out.emplace_back(h + "attn.c_attn.bias", &fused_b[l]);
    out.emplace_back(h + "attn.c_proj.weight", &L.attn.wo);
    out.emplace_back(h + "attn.c_proj.bias", &L.attn.bo);
    out.emplace_back(h + "ln_2.weight", &L.ln2.gain);
    out.emplace_back(h + "ln_2.bias", &L.ln2.bias);
    out.emplace_back(h + "mlp.c_fc.weight", &L.mlp.w_in);
    out.emplace_back(h + "mlp.c_fc.bias", &L.mlp.b_in);
    out.emplace_back(h + "mlp.c_proj.weight", &L.mlp.w_out);
    out.emplace_back(h + "mlp.c_proj.bias", &L.mlp.b_out);
  }
  out.emplace_back("ln_f.weight", &m.ln_f.gain);
  out.emplace_back("ln_f.bias", &m.ln_f.bias);
  if (!m.tied_unembedding()) out.emplace_back("lm_head.weight", &m.lm_head);
  write_safetensors(path, out);
}

}  // namespace mechtrace
