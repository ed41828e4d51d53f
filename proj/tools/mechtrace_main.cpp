// mechtrace: dataset construction, logit tracing, attention interventions and
// similarity analysis for GPT-2-family models, driven from the command line.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mechtrace/corpus.hpp"
#include "mechtrace/embeddings.hpp"
#include "mechtrace/errors.hpp"
#include "mechtrace/hashing.hpp"
#include "mechtrace/intervention.hpp"
#include "mechtrace/model.hpp"
#include "mechtrace/parallel.hpp"
#include "mechtrace/reports.hpp"
#include "mechtrace/rng.hpp"
#include "mechtrace/safetensors.hpp"
#include "mechtrace/tokenizer.hpp"
#include "mechtrace/tracer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mechtrace;

namespace {

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

json load_config_json(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream f(path);
  if (!f) throw InputError("cannot open config file: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw SchemaError("config file is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_object()) throw SchemaError("config file must be a JSON object: " + path);
  return j;
}

template <typename T>
void apply_cfg(CLI::App* cmd, const json& cfg, const char* key, T& out) {
  if (!cfg.contains(key)) return;
  if (cmd->count(std::string("--") + key) > 0) return;  // CLI wins
  try {
    out = cfg.at(key).get<T>();
  } catch (const json::exception& e) {
    throw SchemaError(std::string("config key '") + key + "' has the wrong type: " +
                      e.what());
  }
}

void require_value(const std::string& flag, const std::string& value) {
  if (value.empty())
    throw InputError("missing required option --" + flag + " (flag or config)");
}

ModelConfig resolve_model_config(const std::string& model_path,
                                 const std::string& config_path) {
  if (!config_path.empty()) return ModelConfig::from_json_file(config_path);
  const fs::path sibling = fs::path(model_path).parent_path() / "config.json";
  if (fs::exists(sibling)) return ModelConfig::from_json_file(sibling.string());
  return ModelConfig::gpt2_small();
}

std::string hash_input(RunManifest& mf, const std::string& label, const std::string& path) {
  const std::string h = Sha256::of_file(path);
  mf.input_hashes[label] = h;
  return h;
}

void hash_output(RunManifest& mf, const std::string& out_dir, const std::string& name) {
  mf.output_hashes[name] = Sha256::of_file((fs::path(out_dir) / name).string());
}

void ensure_out_dir(const std::string& out) {
  if (out.empty()) throw InputError("missing required option --out");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw InputError("cannot create output directory " + out + ": " + ec.message());
}

std::string config_hash_of(const json& resolved) { return Sha256::of_string(resolved.dump()); }

// deterministic subsample of a dataset; requires a seed when it shrinks
Dataset subsample(Dataset ds, int64_t sample, uint64_t seed, bool seed_given) {
  if (sample <= 0 || sample >= static_cast<int64_t>(ds.instances.size())) return ds;
  if (!seed_given) throw InputError("--sample requires --seed");
  const auto picks = sample_indices(static_cast<int64_t>(ds.instances.size()), sample, seed);
  Dataset out;
  out.provenance = ds.provenance;
  out.instances.reserve(picks.size());
  for (int64_t i : picks) out.instances.push_back(std::move(ds.instances[static_cast<size_t>(i)]));
  return out;
}

int resolve_workers(int workers) {
  return workers > 0 ? workers : default_workers();
}

// --- factual-screen cache ----------------------------------------------------
// Key: model+source+tokenizer+premise hashes. The only environment override
// the tool honors is MECHTRACE_CACHE_DIR.

fs::path cache_directory() {
  if (const char* env = std::getenv("MECHTRACE_CACHE_DIR"); env && *env)
    return fs::path(env);
  return fs::temp_directory_path() / "mechtrace-cache";
}

std::unordered_map<std::string, int> load_screen_cache(const fs::path& file) {
  std::unordered_map<std::string, int> out;
  std::ifstream f(file);
  if (!f) return out;
  json j;
  try {
    f >> j;
  } catch (const json::exception&) {
    return out;  // stale or corrupt cache: recompute
  }
  for (auto& [k, v] : j.items())
    if (v.is_number_integer()) out[k] = v.get<int>();
  return out;
}

void save_screen_cache(const fs::path& file, const std::unordered_map<std::string, int>& map) {
  std::error_code ec;
  fs::create_directories(file.parent_path(), ec);
  if (ec) return;  // cache is best-effort
  json j = json::object();
  for (const auto& [k, v] : map) j[k] = v;
  std::ofstream f(file, std::ios::trunc);
  f << j.dump();
}

std::string token_key(std::span<const int> tokens) {
  std::string key;
  for (int t : tokens) {
    key += std::to_string(t);
    key.push_back(',');
  }
  return key;
}

// --- subcommand argument bags --------------------------------------------------

struct DatasetBuildArgs {
  std::string counterfact, model, model_config, vocab, merges, out, embeddings;
  std::string field_map, premise = kDefaultPremise, config, drop_log;
  int64_t n = 10000;
  uint64_t seed = 0;
  int workers = 0;
};

struct TraceArgs {
  std::string dataset, model, model_config, out, config;
  std::string attn_profile, rank_curves_group, projection = "bare";
  bool lens_map = false, blocks = false, heads = false;
  bool dump_attn = false, dump_lens = false;
  int64_t sample = 0;
  uint64_t seed = 0;
  int workers = 0;
  int64_t mem_budget_mb = 4096;
};

struct InterveneArgs {
  std::string dataset, model, model_config, out, config;
  std::string heads, ablate, grid, spec;
  double alpha = 0.0;
  int64_t sample = 0;
  uint64_t seed = 0;
  int workers = 0;
};

struct SimilarityArgs {
  std::string dataset, model, model_config, embeddings, out, config;
  int bins = 10;
  int64_t sample = 0;
  uint64_t seed = 0;
  int workers = 0;
};

struct FixturesArgs {
  std::string model, model_config, prompts, golden, config;
  double tolerance = 1e-3;
};

Projection parse_projection(const std::string& s) {
  if (s == "bare") return Projection::Bare;
  if (s == "norm") return Projection::FinalNorm;
  throw InputError("--projection must be 'bare' or 'norm', got '" + s + "'");
}

// --- dataset build --------------------------------------------------------------

int run_dataset_build(CLI::App* cmd, DatasetBuildArgs a) {
  const json cfg = load_config_json(a.config);
  apply_cfg(cmd, cfg, "counterfact", a.counterfact);
  apply_cfg(cmd, cfg, "model", a.model);
  apply_cfg(cmd, cfg, "model-config", a.model_config);
  apply_cfg(cmd, cfg, "vocab", a.vocab);
  apply_cfg(cmd, cfg, "merges", a.merges);
  apply_cfg(cmd, cfg, "out", a.out);
  apply_cfg(cmd, cfg, "embeddings", a.embeddings);
  apply_cfg(cmd, cfg, "field-map", a.field_map);
  apply_cfg(cmd, cfg, "premise", a.premise);
  apply_cfg(cmd, cfg, "n", a.n);
  apply_cfg(cmd, cfg, "seed", a.seed);
  apply_cfg(cmd, cfg, "workers", a.workers);
  require_value("counterfact", a.counterfact);
  require_value("model", a.model);
  require_value("vocab", a.vocab);
  require_value("merges", a.merges);
  if (cmd->count("--seed") == 0 && !cfg.contains("seed"))
    throw InputError("--seed is mandatory for dataset sampling");
  ensure_out_dir(a.out);
  const int workers = resolve_workers(a.workers);

  Timer wall;
  RunManifest mf;
  mf.command = "dataset build";
  const std::string model_hash = hash_input(mf, "model", a.model);
  const std::string source_hash = hash_input(mf, "counterfact", a.counterfact);
  const std::string vocab_hash = hash_input(mf, "vocab", a.vocab);
  hash_input(mf, "merges", a.merges);
  mf.config_hash = config_hash_of(json{{"command", "dataset build"},
                                       {"n", a.n},
                                       {"seed", a.seed},
                                       {"premise", a.premise},
                                       {"embeddings", a.embeddings}});

  Timer t_load;
  const BpeTokenizer tok = BpeTokenizer::load(a.vocab, a.merges);
  const FieldMap fields =
      a.field_map.empty() ? FieldMap{} : FieldMap::from_json_file(a.field_map);
  const auto records = load_counterfact(a.counterfact, fields);
  const ModelConfig mcfg = resolve_model_config(a.model, a.model_config);
  const ModelBundle model = load_model(a.model, mcfg);
  mf.stage_seconds["load"] = t_load.seconds();
  std::cout << "loaded " << records.size() << " records; model parameters: "
            << model.parameter_count() << "\n";

  // factual screen, memoized on (model, source, tokenizer, premise)
  const fs::path cache_file =
      cache_directory() /
      ("screen-" + Sha256::of_string(model_hash + source_hash + vocab_hash).substr(0, 32) +
       ".json");
  const auto cached = load_screen_cache(cache_file);
  std::unordered_map<std::string, int> fresh;
  std::mutex fresh_mu;
  GreedyFn greedy = [&](std::span<const int> tokens) {
    const std::string key = token_key(tokens);
    if (auto it = cached.find(key); it != cached.end()) return it->second;
    const int got = greedy_next(model, tokens);
    std::lock_guard<std::mutex> lock(fresh_mu);
    fresh[key] = got;
    return got;
  };

  Timer t_screen;
  std::vector<std::string> drop_log;
  Dataset ds = filter_and_sample(records, tok, greedy, a.n, a.seed, a.premise, workers,
                                 a.drop_log.empty() ? nullptr : &drop_log);
  mf.stage_seconds["filter"] = t_screen.seconds();

  if (!fresh.empty()) {
    auto merged = cached;
    merged.insert(fresh.begin(), fresh.end());
    save_screen_cache(cache_file, merged);
  }

  ds.provenance.source_path = a.counterfact;
  ds.provenance.source_sha256 = source_hash;
  ds.provenance.model_sha256 = model_hash;
  ds.provenance.tool_version = kToolVersion;

  json sim_counts = nullptr;
  if (!a.embeddings.empty()) {
    hash_input(mf, "embeddings", a.embeddings);
    Timer t_sim;
    const EmbeddingTable emb = EmbeddingTable::load(a.embeddings);
    const SimilarityCounts c = attach_similarity(ds, emb);
    mf.stage_seconds["similarity"] = t_sim.seconds();
    sim_counts = {{"scored", c.scored}, {"oov", c.oov}};
  }

  const std::string ds_path = (fs::path(a.out) / "dataset.jsonl").string();
  write_dataset(ds_path, ds);
  if (!a.drop_log.empty()) {
    std::ostringstream log;
    for (const auto& line : drop_log) log << line << "\n";
    write_text_file(a.drop_log, log.str());
  }

  const FilterStats& st = ds.provenance.stats;
  json stats = {
      {"records", st.records},
      {"failed_single_token", st.failed_single_token},
      {"failed_single_token_true", st.failed_single_token_true},
      {"failed_single_token_new", st.failed_single_token_new},
      {"equal_targets", st.equal_targets},
      {"failed_factual", st.failed_factual},
      {"failed_span", st.failed_span},
      {"pool", st.pool},
      {"sampled", static_cast<int64_t>(ds.instances.size())},
      {"truncated", st.truncated},
      {"seed", a.seed},
      {"similarity", sim_counts},
  };
  write_text_file((fs::path(a.out) / "build_stats.json").string(), stats.dump(1) + "\n");

  hash_output(mf, a.out, "dataset.jsonl");
  hash_output(mf, a.out, "build_stats.json");
  mf.wall_seconds = wall.seconds();
  mf.write((fs::path(a.out) / "run_manifest.json").string());

  std::cout << "pool after filters: " << st.pool << " (records " << st.records
            << ", failed single-token " << st.failed_single_token << ", equal targets "
            << st.equal_targets << ", failed factual screen " << st.failed_factual
            << ", failed span labeling " << st.failed_span << ")\n";
  if (st.truncated)
    std::cout << "warning: pool smaller than requested n=" << a.n
              << "; kept the full pool\n";
  std::cout << "dataset written: " << ds_path << " (" << ds.instances.size()
            << " instances)\n";
  return 0;
}

// --- trace ----------------------------------------------------------------------

int64_t estimate_capture_bytes(const ModelConfig& cfg, const CaptureSpec& cap,
                               int64_t max_len) {
  const int64_t L = cfg.n_layer, H = cfg.n_head, d = cfg.d_model, k = max_len;
  int64_t bytes = 0;
  if (cap.residuals) bytes += (L + 1) * k * d * 4;
  if (cap.block_outputs) bytes += 2 * L * (cap.block_outputs_full ? k : 1) * d * 4;
  if (cap.head_outputs) bytes += L * H * (cap.head_outputs_full ? k : 1) * d * 4;
  if (cap.attention) bytes += L * H * k * k * 4;
  return bytes;
}

int run_trace(CLI::App* cmd, TraceArgs a) {
  const json cfg = load_config_json(a.config);
  apply_cfg(cmd, cfg, "dataset", a.dataset);
  apply_cfg(cmd, cfg, "model", a.model);
  apply_cfg(cmd, cfg, "model-config", a.model_config);
  apply_cfg(cmd, cfg, "out", a.out);
  apply_cfg(cmd, cfg, "sample", a.sample);
  apply_cfg(cmd, cfg, "seed", a.seed);
  apply_cfg(cmd, cfg, "workers", a.workers);
  apply_cfg(cmd, cfg, "projection", a.projection);
  apply_cfg(cmd, cfg, "lens-map", a.lens_map);
  apply_cfg(cmd, cfg, "blocks", a.blocks);
  apply_cfg(cmd, cfg, "heads", a.heads);
  apply_cfg(cmd, cfg, "attn-profile", a.attn_profile);
  apply_cfg(cmd, cfg, "rank-curves", a.rank_curves_group);
  require_value("dataset", a.dataset);
  require_value("model", a.model);
  ensure_out_dir(a.out);
  const int workers = resolve_workers(a.workers);
  const Projection projection = parse_projection(a.projection);

  // default analysis set when nothing is selected explicitly
  if (!a.lens_map && !a.blocks && !a.heads && a.attn_profile.empty() &&
      a.rank_curves_group.empty() && !a.dump_attn && !a.dump_lens) {
    a.lens_map = a.blocks = a.heads = true;
  }

  Timer wall;
  RunManifest mf;
  mf.command = "trace";
  hash_input(mf, "model", a.model);
  hash_input(mf, "dataset", a.dataset);
  mf.config_hash = config_hash_of(json{{"command", "trace"},
                                       {"sample", a.sample},
                                       {"seed", a.seed},
                                       {"projection", a.projection},
                                       {"lens_map", a.lens_map},
                                       {"blocks", a.blocks},
                                       {"heads", a.heads},
                                       {"attn_profile", a.attn_profile},
                                       {"rank_curves", a.rank_curves_group}});

  Timer t_load;
  const ModelConfig mcfg = resolve_model_config(a.model, a.model_config);
  const ModelBundle model = load_model(a.model, mcfg);
  Dataset ds = subsample(read_dataset(a.dataset), a.sample, a.seed, cmd->count("--seed") > 0 || cfg.contains("seed"));
  if (ds.instances.empty()) throw InputError("dataset is empty: " + a.dataset);
  mf.stage_seconds["load"] = t_load.seconds();

  int64_t max_len = 0;
  for (const auto& inst : ds.instances)
    max_len = std::max<int64_t>(max_len, static_cast<int64_t>(inst.tokens.size()));
  CaptureSpec worst;
  worst.residuals = a.lens_map || !a.rank_curves_group.empty() || a.dump_lens;
  worst.block_outputs = a.blocks;
  worst.head_outputs = a.heads;
  worst.attention = !a.attn_profile.empty() || a.dump_attn;
  const int64_t per_instance = estimate_capture_bytes(mcfg, worst, max_len);
  if (per_instance * workers > a.mem_budget_mb * 1024 * 1024)
    throw InputError(
        "estimated capture memory " + std::to_string(per_instance * workers / (1 << 20)) +
        " MiB exceeds --mem-budget-mb " + std::to_string(a.mem_budget_mb) +
        "; reduce capture flags, lower --workers, or use --sample");

  json summary;
  summary["n"] = ds.instances.size();
  summary["projection"] = a.projection;
  summary["sample"] = a.sample;

  {
    Timer t;
    const WinRates w = win_rates(ds, model, workers);
    summary["win_rates"] = json::parse(win_rates_json(w));
    mf.stage_seconds["win_rates"] = t.seconds();
    std::cout << "cofa_win_rate " << fmt_rate(w.cofa_rate()) << "  fact_win_rate "
              << fmt_rate(w.fact_rate()) << "  (n=" << w.n << ")\n";
  }

  if (a.lens_map) {
    Timer t;
    const LogitLensMap map = layer_position_map(ds, model, workers);
    write_text_file((fs::path(a.out) / "lens_map.csv").string(), lens_map_csv(map));
    hash_output(mf, a.out, "lens_map.csv");
    mf.stage_seconds["lens_map"] = t.seconds();
  }
  if (a.blocks) {
    Timer t;
    const BlockAttribution ba = block_attribution(ds, model, projection, workers);
    write_text_file((fs::path(a.out) / "block_attribution.csv").string(),
                    block_attribution_csv(ba));
    hash_output(mf, a.out, "block_attribution.csv");
    summary["block_attribution"] = {
        {"embedding_delta_mean", fmt_stat(ba.embedding_delta.mean())},
        {"final_delta_mean", fmt_stat(ba.final_delta.mean())},
        {"telescope_gap_mean", fmt_stat(ba.telescope_gap.mean())},
        {"final_norm_gap_mean", fmt_stat(ba.lens_gap.mean())},
    };
    mf.stage_seconds["blocks"] = t.seconds();
  }
  if (a.heads) {
    Timer t;
    const HeadAttribution ha = head_attribution(ds, model, projection, workers);
    write_text_file((fs::path(a.out) / "head_attribution.csv").string(),
                    head_attribution_csv(ha));
    hash_output(mf, a.out, "head_attribution.csv");
    json negs = json::array();
    for (HeadRef h : ha.most_negative(4)) negs.push_back(h.str());
    json poss = json::array();
    for (HeadRef h : ha.most_positive(4)) poss.push_back(h.str());
    summary["head_attribution"] = {{"most_negative", negs}, {"most_positive", poss}};
    mf.stage_seconds["heads"] = t.seconds();
  }
  if (!a.attn_profile.empty()) {
    Timer t;
    const auto heads = parse_head_list(a.attn_profile);
    const HeadAttentionProfile prof = head_attention_profile(ds, model, heads, workers);
    write_text_file((fs::path(a.out) / "attention_profile.csv").string(),
                    attention_profile_csv(prof));
    hash_output(mf, a.out, "attention_profile.csv");
    mf.stage_seconds["attn_profile"] = t.seconds();
  }
  if (!a.rank_curves_group.empty()) {
    Timer t;
    const auto g = SpanSet::group_index(a.rank_curves_group);
    if (!g)
      throw InputError("unknown position group '" + a.rank_curves_group +
                       "' for --rank-curves");
    const RankCurves rc = rank_curves(ds, model, *g, workers);
    write_text_file((fs::path(a.out) / "rank_curves.csv").string(), rank_curves_csv(rc));
    hash_output(mf, a.out, "rank_curves.csv");
    mf.stage_seconds["rank_curves"] = t.seconds();
  }
  if (a.dump_attn) {
    Timer t;
    const fs::path dir = fs::path(a.out) / "attention";
    fs::create_directories(dir);
    CaptureSpec cap;
    cap.attention = true;
    for (const auto& inst : ds.instances) {
      ForwardResult res = forward(model, inst.tokens, cap);
      std::vector<std::pair<std::string, const Tensor*>> tensors;
      for (int l = 0; l < mcfg.n_layer; ++l)
        tensors.emplace_back("attn_l" + std::to_string(l),
                             &res.trace.attention[static_cast<size_t>(l)]);
      write_safetensors((dir / (inst.record_id + ".safetensors")).string(), tensors,
                        {{"record_id", inst.record_id}});
    }
    mf.stage_seconds["dump_attn"] = t.seconds();
  }
  if (a.dump_lens) {
    Timer t;
    CaptureSpec cap;
    cap.residuals = true;
    std::string csv = "record_id,layer,position,group,fact_logit,cofa_logit\n";
    for (const auto& inst : ds.instances) {
      ForwardResult res = forward(model, inst.tokens, cap);
      for (int l = 0; l <= mcfg.n_layer; ++l)
        for (int p = 0; p < static_cast<int>(inst.tokens.size()); ++p) {
          const char* group = "";
          for (int g = 0; g < SpanSet::kGroups; ++g) {
            const TokenRange& r = inst.spans.group(g);
            if (p >= r.begin && p < r.end) {
              group = SpanSet::group_name(g);
              break;
            }
          }
          const PairLogits pl =
              logit_lens_pair(res.trace, model, p, l, inst.t_fact, inst.t_cofa);
          csv += inst.record_id + "," + std::to_string(l) + "," + std::to_string(p) +
                 "," + group + "," + fmt_stat(pl.fact) + "," + fmt_stat(pl.cofa) + "\n";
        }
    }
    write_text_file((fs::path(a.out) / "lens_per_token.csv").string(), csv);
    hash_output(mf, a.out, "lens_per_token.csv");
    mf.stage_seconds["dump_lens"] = t.seconds();
  }

  write_text_file((fs::path(a.out) / "summary.json").string(), summary.dump(1) + "\n");
  hash_output(mf, a.out, "summary.json");
  mf.wall_seconds = wall.seconds();
  mf.write((fs::path(a.out) / "run_manifest.json").string());
  std::cout << "trace outputs written to " << a.out << "\n";
  return 0;
}

// --- intervene --------------------------------------------------------------------

int run_intervene(CLI::App* cmd, InterveneArgs a) {
  const json cfg = load_config_json(a.config);
  apply_cfg(cmd, cfg, "dataset", a.dataset);
  apply_cfg(cmd, cfg, "model", a.model);
  apply_cfg(cmd, cfg, "model-config", a.model_config);
  apply_cfg(cmd, cfg, "out", a.out);
  apply_cfg(cmd, cfg, "heads", a.heads);
  apply_cfg(cmd, cfg, "ablate", a.ablate);
  apply_cfg(cmd, cfg, "grid", a.grid);
  apply_cfg(cmd, cfg, "spec", a.spec);
  apply_cfg(cmd, cfg, "alpha", a.alpha);
  apply_cfg(cmd, cfg, "sample", a.sample);
  apply_cfg(cmd, cfg, "seed", a.seed);
  apply_cfg(cmd, cfg, "workers", a.workers);
  require_value("dataset", a.dataset);
  require_value("model", a.model);
  ensure_out_dir(a.out);
  const int workers = resolve_workers(a.workers);

  const bool mode_scale = !a.heads.empty();
  const bool mode_ablate = !a.ablate.empty();
  const bool mode_spec = !a.spec.empty();
  if (mode_scale + mode_ablate + mode_spec != 1)
    throw InputError("pick exactly one of --heads (with --alpha/--grid), --ablate, --spec");
  if (mode_scale && a.alpha <= 0.0 && a.grid.empty())
    throw InputError("--heads needs --alpha or --grid");

  Timer wall;
  RunManifest mf;
  mf.command = "intervene";
  hash_input(mf, "model", a.model);
  hash_input(mf, "dataset", a.dataset);
  mf.config_hash = config_hash_of(json{{"command", "intervene"},
                                       {"heads", a.heads},
                                       {"ablate", a.ablate},
                                       {"alpha", a.alpha},
                                       {"grid", a.grid},
                                       {"spec", a.spec},
                                       {"sample", a.sample},
                                       {"seed", a.seed}});

  Timer t_load;
  const ModelConfig mcfg = resolve_model_config(a.model, a.model_config);
  const ModelBundle model = load_model(a.model, mcfg);
  Dataset ds = subsample(read_dataset(a.dataset), a.sample, a.seed,
                         cmd->count("--seed") > 0 || cfg.contains("seed"));
  if (ds.instances.empty()) throw InputError("dataset is empty: " + a.dataset);
  mf.stage_seconds["load"] = t_load.seconds();

  json report;
  report["n"] = ds.instances.size();
  std::string csv = "variant,alpha,n,fact_wins,fact_rate,ci_lo,ci_hi\n";
  auto csv_row = [&](const std::string& name, const std::string& alpha, const WinRates& w) {
    const auto ci = w.fact_ci();
    csv += name + "," + alpha + "," + std::to_string(w.n) + "," +
           std::to_string(w.fact_wins) + "," + fmt_rate(w.fact_rate()) + "," +
           fmt_rate(ci.lo) + "," + fmt_rate(ci.hi) + "\n";
  };

  Timer t_run;
  if (mode_scale) {
    const auto heads = parse_head_list(a.heads);
    json jheads = json::array();
    for (HeadRef h : heads) jheads.push_back(h.str());
    report["heads"] = jheads;
    if (!a.grid.empty()) {
      std::vector<float> candidates;
      std::stringstream ss(a.grid);
      std::string piece;
      while (std::getline(ss, piece, ','))
        if (!piece.empty()) candidates.push_back(std::stof(piece));
      const GridSearchResult gr = grid_search_alpha(ds, model, heads, candidates, workers);
      report["mode"] = "grid";
      report["clean"] = json::parse(win_rates_json(gr.clean));
      csv_row("clean", "1", gr.clean);
      json table = json::array();
      for (size_t i = 0; i < gr.candidates.size(); ++i) {
        table.push_back({{"alpha", gr.candidates[i]},
                         {"rates", json::parse(win_rates_json(gr.rates[i]))}});
        csv_row("edited", fmt_stat(gr.candidates[i]), gr.rates[i]);
      }
      report["grid"] = table;
      report["alpha_star"] = gr.alpha_star;
      std::cout << "alpha* = " << gr.alpha_star << "\n";
    } else {
      const AlphaResult r = apply_alpha(ds, model, heads, static_cast<float>(a.alpha), workers);
      report["mode"] = "scale";
      report["alpha"] = a.alpha;
      report["clean"] = json::parse(win_rates_json(r.clean));
      report["edited"] = json::parse(win_rates_json(r.edited));
      csv_row("clean", "1", r.clean);
      csv_row("edited", fmt_stat(a.alpha), r.edited);
      if (a.alpha == 1.0) {
        const bool ok =
            verify_noop(ds, model, InterventionSpec::scale_heads(heads, 1.0f), workers);
        report["noop_verified"] = ok;
        std::cout << (ok ? "no-op verified (bitwise)\n"
                         : "no-op verification FAILED\n");
      }
      std::cout << "clean fact rate " << fmt_rate(r.clean.fact_rate()) << " -> edited "
                << fmt_rate(r.edited.fact_rate()) << "\n";
    }
  } else if (mode_ablate) {
    const auto heads = parse_head_list(a.ablate);
    json jheads = json::array();
    for (HeadRef h : heads) jheads.push_back(h.str());
    report["heads"] = jheads;
    report["mode"] = "ablate";
    const AblationResult r = ablate_heads(ds, model, heads, workers);
    report["clean"] = json::parse(win_rates_json(r.clean));
    report["ablated"] = json::parse(win_rates_json(r.ablated));
    csv_row("clean", "", r.clean);
    csv_row("ablated", "", r.ablated);
    std::cout << "clean fact rate " << fmt_rate(r.clean.fact_rate()) << " -> ablated "
              << fmt_rate(r.ablated.fact_rate()) << "\n";
  } else {
    const InterventionSpec spec = InterventionSpec::from_json_file(a.spec);
    report["mode"] = "spec";
    report["spec"] = json::parse(spec.to_json());
    const PairedRates r = paired_win_rates(ds, model, {spec}, workers);
    report["clean"] = json::parse(win_rates_json(r.clean));
    report["edited"] = json::parse(win_rates_json(r.edited[0]));
    csv_row("clean", "", r.clean);
    csv_row("edited", "", r.edited[0]);
    bool all_unit = spec.ablations.empty();
    for (const auto& e : spec.edits) all_unit = all_unit && e.alpha == 1.0f;
    if (all_unit && !spec.edits.empty()) {
      const bool ok = verify_noop(ds, model, spec, workers);
      report["noop_verified"] = ok;
      std::cout << (ok ? "no-op verified (bitwise)\n" : "no-op verification FAILED\n");
    }
  }
  mf.stage_seconds["intervene"] = t_run.seconds();

  write_text_file((fs::path(a.out) / "intervention.json").string(), report.dump(1) + "\n");
  write_text_file((fs::path(a.out) / "intervention.csv").string(), csv);
  hash_output(mf, a.out, "intervention.json");
  hash_output(mf, a.out, "intervention.csv");
  mf.wall_seconds = wall.seconds();
  mf.write((fs::path(a.out) / "run_manifest.json").string());
  return 0;
}

// --- similarity --------------------------------------------------------------------

int run_similarity(CLI::App* cmd, SimilarityArgs a) {
  const json cfg = load_config_json(a.config);
  apply_cfg(cmd, cfg, "dataset", a.dataset);
  apply_cfg(cmd, cfg, "model", a.model);
  apply_cfg(cmd, cfg, "model-config", a.model_config);
  apply_cfg(cmd, cfg, "embeddings", a.embeddings);
  apply_cfg(cmd, cfg, "out", a.out);
  apply_cfg(cmd, cfg, "bins", a.bins);
  apply_cfg(cmd, cfg, "sample", a.sample);
  apply_cfg(cmd, cfg, "seed", a.seed);
  apply_cfg(cmd, cfg, "workers", a.workers);
  require_value("dataset", a.dataset);
  require_value("model", a.model);
  ensure_out_dir(a.out);
  const int workers = resolve_workers(a.workers);

  Timer wall;
  RunManifest mf;
  mf.command = "similarity";
  hash_input(mf, "model", a.model);
  hash_input(mf, "dataset", a.dataset);
  mf.config_hash = config_hash_of(json{{"command", "similarity"},
                                       {"bins", a.bins},
                                       {"sample", a.sample},
                                       {"seed", a.seed},
                                       {"embeddings", a.embeddings}});

  Timer t_load;
  const ModelConfig mcfg = resolve_model_config(a.model, a.model_config);
  const ModelBundle model = load_model(a.model, mcfg);
  Dataset ds = subsample(read_dataset(a.dataset), a.sample, a.seed,
                         cmd->count("--seed") > 0 || cfg.contains("seed"));
  if (ds.instances.empty()) throw InputError("dataset is empty: " + a.dataset);
  mf.stage_seconds["load"] = t_load.seconds();

  bool any_scored = false;
  for (const auto& inst : ds.instances) any_scored = any_scored || inst.similarity.has_value();
  json sim_counts = nullptr;
  if (!a.embeddings.empty()) {
    hash_input(mf, "embeddings", a.embeddings);
    const EmbeddingTable emb = EmbeddingTable::load(a.embeddings);
    const SimilarityCounts c = attach_similarity(ds, emb);
    sim_counts = {{"scored", c.scored}, {"oov", c.oov}};
  } else if (!any_scored) {
    throw InputError("dataset has no similarity scores; pass --embeddings");
  }

  Timer t_run;
  const SimilarityBins bins = similarity_bins(ds, a.bins);
  const auto flags = fact_win_flags(ds, model, workers);
  const WinRates overall = rates_from_flags(flags);

  std::vector<uint8_t> scored_flags;
  std::vector<WinRates> per_bin;
  for (const auto& bin : bins.bins) {
    std::vector<uint8_t> bin_flags;
    bin_flags.reserve(bin.instance_indices.size());
    for (int64_t idx : bin.instance_indices) {
      bin_flags.push_back(flags[static_cast<size_t>(idx)]);
      scored_flags.push_back(flags[static_cast<size_t>(idx)]);
    }
    per_bin.push_back(rates_from_flags(bin_flags));
  }
  const WinRates scored_overall = rates_from_flags(scored_flags);
  mf.stage_seconds["similarity"] = t_run.seconds();

  json report;
  report["n"] = ds.instances.size();
  report["bins_requested"] = a.bins;
  report["excluded_oov"] = bins.excluded_oov;
  report["attach_counts"] = sim_counts;
  // both baselines: every instance, and only embedding-scored instances
  report["baseline_all"] = json::parse(win_rates_json(overall));
  report["baseline_scored"] = json::parse(win_rates_json(scored_overall));
  json jb = json::array();
  for (size_t b = 0; b < bins.bins.size(); ++b)
    jb.push_back({{"bin", b},
                  {"similarity_lo", bins.bins[b].lo},
                  {"similarity_hi", bins.bins[b].hi},
                  {"rates", json::parse(win_rates_json(per_bin[b]))}});
  report["bins"] = jb;

  write_text_file((fs::path(a.out) / "similarity.json").string(), report.dump(1) + "\n");
  write_text_file((fs::path(a.out) / "similarity_bins.csv").string(),
                  similarity_bins_csv(bins.bins, per_bin));
  hash_output(mf, a.out, "similarity.json");
  hash_output(mf, a.out, "similarity_bins.csv");
  mf.wall_seconds = wall.seconds();
  mf.write((fs::path(a.out) / "run_manifest.json").string());
  std::cout << "overall fact rate " << fmt_rate(overall.fact_rate()) << "; bottom bin "
            << fmt_rate(per_bin.front().fact_rate()) << ", top bin "
            << fmt_rate(per_bin.back().fact_rate()) << "\n";
  return 0;
}

// --- fixtures verify -----------------------------------------------------------------

int run_fixtures_verify(CLI::App* cmd, FixturesArgs a) {
  const json cfg = load_config_json(a.config);
  apply_cfg(cmd, cfg, "model", a.model);
  apply_cfg(cmd, cfg, "model-config", a.model_config);
  apply_cfg(cmd, cfg, "prompts", a.prompts);
  apply_cfg(cmd, cfg, "golden", a.golden);
  apply_cfg(cmd, cfg, "tolerance", a.tolerance);
  require_value("model", a.model);
  require_value("prompts", a.prompts);
  require_value("golden", a.golden);

  const ModelConfig mcfg = resolve_model_config(a.model, a.model_config);
  const ModelBundle model = load_model(a.model, mcfg);
  std::ifstream pf(a.prompts);
  if (!pf) throw InputError("cannot open prompts file: " + a.prompts);
  json prompts;
  pf >> prompts;
  const SafeTensors golden = SafeTensors::open(a.golden);

  bool all_ok = true;
  for (size_t i = 0; i < prompts.size(); ++i) {
    const auto ids = prompts[i].at("ids").get<std::vector<int>>();
    const Tensor want = golden.load("prompt" + std::to_string(i));
    ForwardResult res = forward(model, ids);
    const int64_t last = res.logits.dim(0) - 1;
    double max_diff = 0.0;
    for (int64_t v = 0; v < res.logits.dim(1); ++v)
      max_diff = std::max(max_diff,
                          std::abs(static_cast<double>(res.logits.at(last, v)) -
                                   want.data[static_cast<size_t>(v)]));
    const bool ok = max_diff <= a.tolerance;
    all_ok = all_ok && ok;
    std::cout << (ok ? "PASS" : "FAIL") << " prompt" << i << " max_abs_diff="
              << fmt_stat(max_diff) << " tolerance=" << fmt_stat(a.tolerance) << "\n";
  }
  if (!all_ok)
    throw NumericError("golden logit fixtures exceeded tolerance " +
                       std::to_string(a.tolerance));
  std::cout << "all fixtures match\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"instrumented GPT-2 inference, logit tracing and attention interventions"};
  app.require_subcommand(1);

  // dataset build
  auto* dataset = app.add_subcommand("dataset", "dataset operations");
  dataset->require_subcommand(1);
  auto* build = dataset->add_subcommand("build", "filter records and build the prompt set");
  DatasetBuildArgs da;
  build->add_option("--counterfact", da.counterfact, "records JSON array");
  build->add_option("--model", da.model, "model safetensors path");
  build->add_option("--model-config", da.model_config, "model config JSON");
  build->add_option("--vocab", da.vocab, "tokenizer vocab.json");
  build->add_option("--merges", da.merges, "tokenizer merges.txt");
  build->add_option("--out", da.out, "output directory");
  build->add_option("--embeddings", da.embeddings, "word-vector table for similarity");
  build->add_option("--field-map", da.field_map, "JSON field-path mapping");
  build->add_option("--premise", da.premise, "premise prefix");
  build->add_option("--n", da.n, "sample size");
  build->add_option("--seed", da.seed, "sampling seed (mandatory)");
  build->add_option("--workers", da.workers, "worker threads (0 = hardware)");
  build->add_option("--config", da.config, "JSON config with defaults for these flags");
  build->add_option("--drop-log", da.drop_log, "write per-record drop reasons here");

  // trace
  auto* trace = app.add_subcommand("trace", "logit-lens and attribution analyses");
  TraceArgs ta;
  trace->add_option("--dataset", ta.dataset, "dataset.jsonl");
  trace->add_option("--model", ta.model, "model safetensors path");
  trace->add_option("--model-config", ta.model_config, "model config JSON");
  trace->add_option("--out", ta.out, "output directory");
  trace->add_option("--sample", ta.sample, "subsample size (0 = full)");
  trace->add_option("--seed", ta.seed, "subsample seed");
  trace->add_option("--workers", ta.workers, "worker threads (0 = hardware)");
  trace->add_option("--projection", ta.projection, "block/head projection: bare|norm");
  trace->add_flag("--lens-map", ta.lens_map, "layer x position lens map");
  trace->add_flag("--blocks", ta.blocks, "attention/MLP block attribution");
  trace->add_flag("--heads", ta.heads, "per-head attribution");
  trace->add_option("--attn-profile", ta.attn_profile, "heads (LxHy,...) for attention profiles");
  trace->add_option("--rank-curves", ta.rank_curves_group, "position group for rank curves");
  trace->add_flag("--dump-attn", ta.dump_attn, "dump full attention maps per prompt");
  trace->add_flag("--dump-lens", ta.dump_lens, "dump per-token lens logits per prompt");
  trace->add_option("--mem-budget-mb", ta.mem_budget_mb, "capture memory budget");
  trace->add_option("--config", ta.config, "JSON config with defaults for these flags");

  // intervene
  auto* intervene = app.add_subcommand("intervene", "attention edits and head ablations");
  InterveneArgs ia;
  intervene->add_option("--dataset", ia.dataset, "dataset.jsonl");
  intervene->add_option("--model", ia.model, "model safetensors path");
  intervene->add_option("--model-config", ia.model_config, "model config JSON");
  intervene->add_option("--out", ia.out, "output directory");
  intervene->add_option("--heads", ia.heads, "heads to scale (LxHy,...)");
  intervene->add_option("--alpha", ia.alpha, "attention multiplier");
  intervene->add_option("--grid", ia.grid, "comma-separated alpha candidates");
  intervene->add_option("--ablate", ia.ablate, "heads to ablate (LxHy,...)");
  intervene->add_option("--spec", ia.spec, "intervention spec JSON file");
  intervene->add_option("--sample", ia.sample, "subsample size (0 = full)");
  intervene->add_option("--seed", ia.seed, "subsample seed");
  intervene->add_option("--workers", ia.workers, "worker threads (0 = hardware)");
  intervene->add_option("--config", ia.config, "JSON config with defaults for these flags");

  // similarity
  auto* similarity = app.add_subcommand("similarity", "win rates by attribute similarity bin");
  SimilarityArgs sa;
  similarity->add_option("--dataset", sa.dataset, "dataset.jsonl");
  similarity->add_option("--model", sa.model, "model safetensors path");
  similarity->add_option("--model-config", sa.model_config, "model config JSON");
  similarity->add_option("--embeddings", sa.embeddings, "word-vector table");
  similarity->add_option("--out", sa.out, "output directory");
  similarity->add_option("--bins", sa.bins, "equal-count bins");
  similarity->add_option("--sample", sa.sample, "subsample size (0 = full)");
  similarity->add_option("--seed", sa.seed, "subsample seed");
  similarity->add_option("--workers", sa.workers, "worker threads (0 = hardware)");
  similarity->add_option("--config", sa.config, "JSON config with defaults for these flags");

  // fixtures verify
  auto* fixtures = app.add_subcommand("fixtures", "golden fixture operations");
  fixtures->require_subcommand(1);
  auto* verify = fixtures->add_subcommand("verify", "check forward logits against goldens");
  FixturesArgs fa;
  verify->add_option("--model", fa.model, "model safetensors path");
  verify->add_option("--model-config", fa.model_config, "model config JSON");
  verify->add_option("--prompts", fa.prompts, "prompts JSON (text + ids)");
  verify->add_option("--golden", fa.golden, "golden logits safetensors");
  verify->add_option("--tolerance", fa.tolerance, "absolute per-logit tolerance");
  verify->add_option("--config", fa.config, "JSON config with defaults for these flags");

  CLI11_PARSE(app, argc, argv);

  try {
    if (build->parsed()) return run_dataset_build(build, da);
    if (trace->parsed()) return run_trace(trace, ta);
    if (intervene->parsed()) return run_intervene(intervene, ia);
    if (similarity->parsed()) return run_similarity(similarity, sa);
    if (verify->parsed()) return run_fixtures_verify(verify, fa);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
