#include "mechtrace/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mechtrace/errors.hpp"
#include "mechtrace/parallel.hpp"
#include "mechtrace/rng.hpp"

namespace mechtrace {

using nlohmann::json;

namespace {

std::string collapse_spaces(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  bool in_ws = false;
  for (char c : s) {
    const bool ws = (c == ' ' || c == '\t' || c == '\n' || c == '\r');
    if (ws) {
      in_ws = true;
      continue;
    }
    if (in_ws && !out.empty()) out.push_back(' ');
    in_ws = false;
    out.push_back(c);
  }
  return out;
}

const json* walk_path(const json& obj, const std::string& dotted) {
  const json* cur = &obj;
  size_t pos = 0;
  while (pos <= dotted.size()) {
    const size_t dot = dotted.find('.', pos);
    const std::string key = dotted.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (!cur->is_object() || !cur->contains(key)) return nullptr;
    cur = &(*cur)[key];
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  return cur;
}

std::string field_as_string(const json& rec, const std::string& path,
                            const std::string& record_id) {
  const json* v = walk_path(rec, path);
  if (!v)
    throw SchemaError("record " + record_id + " is missing field path '" + path + "'");
  if (v->is_string()) return v->get<std::string>();
  if (v->is_number_integer()) return std::to_string(v->get<int64_t>());
  throw SchemaError("record " + record_id + " field '" + path + "' is not a string");
}

size_t count_occurrences(const std::string& hay, const std::string& needle) {
  if (needle.empty()) return 0;
  size_t count = 0, pos = 0;
  while ((pos = hay.find(needle, pos)) != std::string::npos) {
    ++count;
    pos += needle.size();
  }
  return count;
}

}  // namespace

FieldMap FieldMap::from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot open field map: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw SchemaError("field map is not valid JSON: " + std::string(e.what()));
  }
  FieldMap m;
  m.record_id = j.value("record_id", m.record_id);
  m.subject = j.value("subject", m.subject);
  m.template_text = j.value("template", m.template_text);
  m.target_true = j.value("target_true", m.target_true);
  m.target_new = j.value("target_new", m.target_new);
  return m;
}

std::vector<CounterFactRecord> load_counterfact(const std::string& path,
                                                const FieldMap& fields) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open records file: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw SchemaError("records file is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_array()) throw SchemaError("records file must be a JSON array: " + path);

  std::vector<CounterFactRecord> out;
  out.reserve(j.size());
  for (size_t i = 0; i < j.size(); ++i) {
    const json& rec = j[i];
    CounterFactRecord r;
    const json* idv = walk_path(rec, fields.record_id);
    r.record_id = idv ? (idv->is_string() ? idv->get<std::string>() : idv->dump())
                      : std::to_string(i);
    r.subject = field_as_string(rec, fields.subject, r.record_id);
    r.template_text = field_as_string(rec, fields.template_text, r.record_id);
    r.target_true = field_as_string(rec, fields.target_true, r.record_id);
    r.target_new = field_as_string(rec, fields.target_new, r.record_id);
    if (r.subject.empty() || r.template_text.empty() || r.target_true.empty() ||
        r.target_new.empty())
      throw SchemaError("record " + r.record_id + " has an empty field");
    const size_t placeholders = count_occurrences(r.template_text, "{}");
    if (placeholders != 1)
      throw SchemaError("record " + r.record_id + " template must contain exactly one "
                        "'{}' placeholder, found " + std::to_string(placeholders) +
                        ": '" + r.template_text + "'");
    out.push_back(std::move(r));
  }
  return out;
}

PromptLayout build_prompt_layout(const CounterFactRecord& rec,
                                 const std::string& premise_prefix) {
  const std::string subject = collapse_spaces(rec.subject);
  const std::string tmpl = collapse_spaces(rec.template_text);
  const std::string target_new = collapse_spaces(rec.target_new);
  if (subject.empty() || tmpl.empty() || target_new.empty())
    throw SchemaError("record " + rec.record_id + " has an empty constituent");
  const size_t ph = tmpl.find("{}");
  if (ph == std::string::npos || tmpl.find("{}", ph + 2) != std::string::npos)
    throw SchemaError("record " + rec.record_id +
                      " template must contain exactly one '{}' placeholder");
  const std::string t_pre = tmpl.substr(0, ph);
  const std::string t_post = tmpl.substr(ph + 2);
  const std::string premise = collapse_spaces(premise_prefix);

  PromptLayout L;
  std::string& text = L.text;
  auto append = [&text](const std::string& s) { text += s; };

  if (!premise.empty()) {
    append(premise);
    append(" ");
  }
  // sentence 1: {s r} + attribute
  L.sent1_begin = text.size();
  append(t_pre);
  L.subj1_begin = text.size();
  append(subject);
  L.subj1_end = text.size();
  append(t_post);
  append(" ");
  L.attr_begin = text.size();
  append(target_new);
  L.attr_end = text.size();
  L.sent1_end = text.size();
  // exactly one period between the sentences
  append(text.ends_with(".") ? " " : ". ");
  // sentence 2: {s r}, truncated before the attribute
  L.sent2_begin = text.size();
  append(t_pre);
  L.subj2_begin = text.size();
  append(subject);
  L.subj2_end = text.size();
  append(t_post);
  L.sent2_end = text.size();
  while (!text.empty() && text.back() == ' ') text.pop_back();
  L.sent2_end = std::min(L.sent2_end, text.size());
  return L;
}

std::string build_prompt(const CounterFactRecord& rec, const std::string& premise_prefix) {
  return build_prompt_layout(rec, premise_prefix).text;
}

const TokenRange& SpanSet::group(int g) const {
  switch (g) {
    case 0: return premise;
    case 1: return subject1;
    case 2: return relation1;
    case 3: return attribute;
    case 4: return subject2;
    case 5: return relation2;
    case 6: return last;
  }
  throw NumericError("span group index out of range: " + std::to_string(g));
}

const char* SpanSet::group_name(int g) {
  static constexpr const char* names[kGroups] = {
      "premise_marker", "subject_1", "relation_1", "attribute",
      "subject_2",      "relation_2", "last"};
  if (g < 0 || g >= kGroups)
    throw NumericError("span group index out of range: " + std::to_string(g));
  return names[g];
}

std::optional<int> SpanSet::group_index(const std::string& name) {
  for (int g = 0; g < kGroups; ++g)
    if (name == group_name(g)) return g;
  return std::nullopt;
}

namespace {

// token range covering [begin, end) exactly, allowing the first token to
// start one byte earlier when that byte is the leading space it absorbed
bool align_tokens(const std::vector<BpeTokenizer::TokenSpan>& toks,
                  const std::string& text, size_t begin, size_t end, TokenRange& out) {
  int first = -1;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (static_cast<size_t>(toks[i].end) > begin) {
      first = static_cast<int>(i);
      break;
    }
  }
  if (first < 0) return false;
  const auto& f = toks[static_cast<size_t>(first)];
  const bool starts_exact = static_cast<size_t>(f.begin) == begin;
  const bool starts_with_space = static_cast<size_t>(f.begin) + 1 == begin &&
                                 begin >= 1 && text[begin - 1] == ' ';
  if (!starts_exact && !starts_with_space) return false;
  int lastt = first;
  while (static_cast<size_t>(toks[static_cast<size_t>(lastt)].end) < end) {
    ++lastt;
    if (lastt >= static_cast<int>(toks.size())) return false;
  }
  if (static_cast<size_t>(toks[static_cast<size_t>(lastt)].end) != end) return false;
  out = {first, lastt + 1};
  return true;
}

}  // namespace

LabelResult label_instance(const CounterFactRecord& rec, const BpeTokenizer& tok,
                           int t_fact, int t_cofa, const std::string& premise_prefix) {
  PromptLayout L = build_prompt_layout(rec, premise_prefix);

  // a subject string that appears more than once per sentence makes the
  // span attribution ambiguous
  const std::string subject = collapse_spaces(rec.subject);
  const std::string sent1 = L.text.substr(L.sent1_begin, L.sent1_end - L.sent1_begin);
  const std::string sent2 = L.text.substr(L.sent2_begin, L.sent2_end - L.sent2_begin);
  if (count_occurrences(sent1, subject) != 1 || count_occurrences(sent2, subject) != 1)
    return {std::nullopt, "ambiguous subject occurrence"};

  const auto toks = tok.encode_with_offsets(L.text);
  const int n_tokens = static_cast<int>(toks.size());
  if (n_tokens < 3) return {std::nullopt, "prompt too short"};

  TokenRange subj1, attr, subj2;
  if (!align_tokens(toks, L.text, L.subj1_begin, L.subj1_end, subj1))
    return {std::nullopt, "subject (first occurrence) does not align to token boundaries"};
  if (!align_tokens(toks, L.text, L.attr_begin, L.attr_end, attr))
    return {std::nullopt, "attribute does not align to token boundaries"};
  if (!align_tokens(toks, L.text, L.subj2_begin, L.subj2_end, subj2))
    return {std::nullopt, "subject (second occurrence) does not align to token boundaries"};

  if (attr.size() != 1) return {std::nullopt, "attribute spans more than one token"};
  if (toks[static_cast<size_t>(attr.begin)].id != t_cofa)
    return {std::nullopt, "attribute token differs from t_cofa"};

  const int last_index = n_tokens - 1;
  // contiguous cuts in prompt order; separators fall into the following span
  if (!(subj1.begin >= 0 && subj1.end <= attr.begin && attr.end <= subj2.begin &&
        subj2.end <= last_index))
    return {std::nullopt, "span ordering violated"};

  PromptInstance inst;
  inst.record_id = rec.record_id;
  inst.text = L.text;
  inst.tokens.reserve(static_cast<size_t>(n_tokens));
  for (const auto& t : toks) inst.tokens.push_back(t.id);
  inst.t_fact = t_fact;
  inst.t_cofa = t_cofa;
  inst.target_true = collapse_spaces(rec.target_true);
  inst.target_new = collapse_spaces(rec.target_new);
  inst.spans.premise = {0, subj1.begin};
  inst.spans.subject1 = subj1;
  inst.spans.relation1 = {subj1.end, attr.begin};
  inst.spans.attribute = attr;
  inst.spans.subject2 = {attr.end, subj2.end};
  inst.spans.relation2 = {subj2.end, last_index};
  inst.spans.last = {last_index, last_index + 1};
  return {std::move(inst), ""};
}

Dataset filter_and_sample(const std::vector<CounterFactRecord>& records,
                          const BpeTokenizer& tok, const GreedyFn& greedy,
                          int64_t n, uint64_t seed, const std::string& premise_prefix,
                          int workers, std::vector<std::string>* drop_log) {
  Dataset ds;
  FilterStats& st = ds.provenance.stats;
  st.records = static_cast<int64_t>(records.size());
  ds.provenance.seed = seed;
  ds.provenance.requested_n = n;
  ds.provenance.premise_prefix = premise_prefix;

  auto log_drop = [&](const CounterFactRecord& r, const std::string& why) {
    if (drop_log) drop_log->push_back(r.record_id + ": " + why);
  };

  // filter (a): both attributes must be single tokens (with leading space)
  struct Candidate {
    size_t record_index;
    int t_fact, t_cofa;
    std::vector<int> screen_tokens;
  };
  std::vector<Candidate> candidates;
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const int tf = tok.single_token_id(collapse_spaces(r.target_true));
    const int tc = tok.single_token_id(collapse_spaces(r.target_new));
    if (tf < 0 || tc < 0) {
      ++st.failed_single_token;
      if (tf < 0) ++st.failed_single_token_true;
      if (tc < 0) ++st.failed_single_token_new;
      log_drop(r, "attribute is not a single token");
      continue;
    }
    if (tf == tc) {
      ++st.equal_targets;
      log_drop(r, "factual and counterfactual tokens coincide");
      continue;
    }
    CounterFactRecord bare = r;  // "{s r}" prompt: no premise, no attribute
    PromptLayout L = build_prompt_layout(bare, "");
    Candidate c{i, tf, tc,
                tok.encode(L.text.substr(L.sent2_begin, L.sent2_end - L.sent2_begin))};
    candidates.push_back(std::move(c));
  }

  // filter (b): the model must complete {s r} with the factual token;
  // each record is an independent forward call
  std::vector<uint8_t> factual(candidates.size(), 0);
  parallel_for(static_cast<int64_t>(candidates.size()), workers, [&](int64_t i) {
    const auto& c = candidates[static_cast<size_t>(i)];
    factual[static_cast<size_t>(i)] =
        greedy(c.screen_tokens) == c.t_fact ? 1 : 0;
  });

  std::vector<PromptInstance> pool;
  for (size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    const auto& r = records[c.record_index];
    if (!factual[i]) {
      ++st.failed_factual;
      log_drop(r, "model does not complete the sentence factually");
      continue;
    }
    LabelResult lr = label_instance(r, tok, c.t_fact, c.t_cofa, premise_prefix);
    if (!lr.instance) {
      ++st.failed_span;
      log_drop(r, lr.drop_reason);
      continue;
    }
    pool.push_back(std::move(*lr.instance));
  }
  st.pool = static_cast<int64_t>(pool.size());

  if (n >= st.pool) {
    st.truncated = n > st.pool;
    ds.instances = std::move(pool);
    return ds;
  }
  const auto picks = sample_indices(st.pool, n, seed);
  ds.instances.reserve(picks.size());
  for (int64_t idx : picks) ds.instances.push_back(std::move(pool[static_cast<size_t>(idx)]));
  return ds;
}

SimilarityCounts attach_similarity(Dataset& ds, const EmbeddingTable& emb) {
  SimilarityCounts counts;
  for (auto& inst : ds.instances) {
    const auto sim = emb.cosine(inst.target_true, inst.target_new);
    inst.similarity = sim;
    if (sim)
      ++counts.scored;
    else
      ++counts.oov;
  }
  return counts;
}

SimilarityBins similarity_bins(const Dataset& ds, int n_bins) {
  if (n_bins < 1) throw NumericError("similarity bins must be >= 1");
  std::vector<std::pair<float, int64_t>> scored;
  int64_t oov = 0;
  for (size_t i = 0; i < ds.instances.size(); ++i) {
    if (ds.instances[i].similarity)
      scored.emplace_back(*ds.instances[i].similarity, static_cast<int64_t>(i));
    else
      ++oov;
  }
  if (static_cast<int64_t>(scored.size()) < n_bins)
    throw NumericError("fewer scored instances (" + std::to_string(scored.size()) +
                       ") than bins (" + std::to_string(n_bins) + ")");
  std::sort(scored.begin(), scored.end());

  SimilarityBins out;
  out.excluded_oov = oov;
  const int64_t m = static_cast<int64_t>(scored.size());
  const int64_t base = m / n_bins, rem = m % n_bins;
  int64_t pos = 0;
  for (int b = 0; b < n_bins; ++b) {
    const int64_t size = base + (b < rem ? 1 : 0);
    SimilarityBin bin;
    bin.lo = scored[static_cast<size_t>(pos)].first;
    bin.hi = scored[static_cast<size_t>(pos + size - 1)].first;
    for (int64_t i = pos; i < pos + size; ++i)
      bin.instance_indices.push_back(scored[static_cast<size_t>(i)].second);
    out.bins.push_back(std::move(bin));
    pos += size;
  }
  return out;
}

// --- JSONL serialization -----------------------------------------------------

namespace {

json range_to_json(const TokenRange& r) { return json::array({r.begin, r.end}); }

TokenRange range_from_json(const json& j) {
  if (!j.is_array() || j.size() != 2) throw SchemaError("span range must be [begin, end]");
  return {j[0].get<int>(), j[1].get<int>()};
}

}  // namespace

void write_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write dataset: " + path);
  const auto& p = ds.provenance;
  json header = {
      {"type", "provenance"},
      {"source_path", p.source_path},
      {"source_sha256", p.source_sha256},
      {"model_sha256", p.model_sha256},
      {"seed", p.seed},
      {"requested_n", p.requested_n},
      {"premise_prefix", p.premise_prefix},
      {"tool_version", p.tool_version},
      {"stats",
       {{"records", p.stats.records},
        {"failed_single_token", p.stats.failed_single_token},
        {"failed_single_token_true", p.stats.failed_single_token_true},
        {"failed_single_token_new", p.stats.failed_single_token_new},
        {"equal_targets", p.stats.equal_targets},
        {"failed_factual", p.stats.failed_factual},
        {"failed_span", p.stats.failed_span},
        {"pool", p.stats.pool},
        {"truncated", p.stats.truncated}}},
  };
  f << header.dump() << "\n";
  for (const auto& inst : ds.instances) {
    json spans = json::object();
    for (int g = 0; g < SpanSet::kGroups; ++g)
      spans[SpanSet::group_name(g)] = range_to_json(inst.spans.group(g));
    json j = {
        {"record_id", inst.record_id}, {"text", inst.text},
        {"tokens", inst.tokens},       {"t_fact", inst.t_fact},
        {"t_cofa", inst.t_cofa},       {"target_true", inst.target_true},
        {"target_new", inst.target_new}, {"spans", spans},
    };
    if (inst.similarity)
      j["similarity"] = *inst.similarity;
    else
      j["similarity"] = nullptr;
    f << j.dump() << "\n";
  }
  if (!f) throw InputError("short write on dataset: " + path);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open dataset: " + path);
  Dataset ds;
  std::string line;
  size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw SchemaError("dataset line " + std::to_string(line_no) +
                        " is not valid JSON: " + e.what());
    }
    if (j.value("type", "") == "provenance") {
      auto& p = ds.provenance;
      p.source_path = j.value("source_path", "");
      p.source_sha256 = j.value("source_sha256", "");
      p.model_sha256 = j.value("model_sha256", "");
      p.seed = j.value("seed", 0ULL);
      p.requested_n = j.value("requested_n", static_cast<int64_t>(0));
      p.premise_prefix = j.value("premise_prefix", std::string(kDefaultPremise));
      p.tool_version = j.value("tool_version", "");
      if (j.contains("stats")) {
        const json& s = j["stats"];
        p.stats.records = s.value("records", static_cast<int64_t>(0));
        p.stats.failed_single_token = s.value("failed_single_token", static_cast<int64_t>(0));
        p.stats.failed_single_token_true =
            s.value("failed_single_token_true", static_cast<int64_t>(0));
        p.stats.failed_single_token_new =
            s.value("failed_single_token_new", static_cast<int64_t>(0));
        p.stats.equal_targets = s.value("equal_targets", static_cast<int64_t>(0));
        p.stats.failed_factual = s.value("failed_factual", static_cast<int64_t>(0));
        p.stats.failed_span = s.value("failed_span", static_cast<int64_t>(0));
        p.stats.pool = s.value("pool", static_cast<int64_t>(0));
        p.stats.truncated = s.value("truncated", false);
      }
      continue;
    }
    try {
      PromptInstance inst;
      inst.record_id = j.at("record_id").is_string()
                           ? j.at("record_id").get<std::string>()
                           : j.at("record_id").dump();
      inst.text = j.at("text").get<std::string>();
      inst.tokens = j.at("tokens").get<std::vector<int>>();
      inst.t_fact = j.at("t_fact").get<int>();
      inst.t_cofa = j.at("t_cofa").get<int>();
      inst.target_true = j.value("target_true", "");
      inst.target_new = j.value("target_new", "");
      const json& spans = j.at("spans");
      inst.spans.premise = range_from_json(spans.at("premise_marker"));
      inst.spans.subject1 = range_from_json(spans.at("subject_1"));
      inst.spans.relation1 = range_from_json(spans.at("relation_1"));
      inst.spans.attribute = range_from_json(spans.at("attribute"));
      inst.spans.subject2 = range_from_json(spans.at("subject_2"));
      inst.spans.relation2 = range_from_json(spans.at("relation_2"));
      inst.spans.last = range_from_json(spans.at("last"));
      if (j.contains("similarity") && !j["similarity"].is_null())
        inst.similarity = j["similarity"].get<float>();
      ds.instances.push_back(std::move(inst));
    } catch (const json::exception& e) {
      throw SchemaError("dataset line " + std::to_string(line_no) +
                        " is malformed: " + e.what());
    }
  }
  return ds;
}

}  // namespace mechtrace
