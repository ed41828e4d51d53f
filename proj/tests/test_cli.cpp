#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mechtrace/corpus.hpp"
#include "testutil.hpp"

using nlohmann::json;
using testutil::data_path;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args, const testutil::TempDir& tmp,
                  const std::string& tag) {
  const std::string out_file = tmp.file("cli-" + tag + ".log");
  const std::string cmd =
      std::string(MECHTRACE_CLI_PATH) + " " + args + " > " + out_file + " 2>&1";
  const int rc = std::system(cmd.c_str());
  CliResult res;
  res.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  std::ifstream f(out_file);
  std::stringstream ss;
  ss << f.rdbuf();
  res.output = ss.str();
  return res;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string model_args() {
  return " --model " + data_path("reference-model/model.safetensors") +
         " --model-config " + data_path("reference-model/config.json");
}

// shared fixture: one dataset build reused by the later commands
struct BuiltDataset {
  testutil::TempDir tmp;
  std::string dataset_path;
  json stats;
};

const BuiltDataset& built() {
  static BuiltDataset b = [] {
    BuiltDataset out;
    const std::string outdir = out.tmp.file("build");
    const CliResult r = run_cli(
        "dataset build --counterfact " + data_path("samples/counterfact_sample.json") +
            model_args() + " --vocab " + data_path("gpt2-tokenizer/vocab.json") +
            " --merges " + data_path("gpt2-tokenizer/merges.txt") +
            " --n 12 --seed 7 --workers 2 --out " + outdir,
        out.tmp, "build");
    REQUIRE(r.exit_code == 0);
    out.dataset_path = outdir + "/dataset.jsonl";
    out.stats = json::parse(slurp(outdir + "/build_stats.json"));
    return out;
  }();
  return b;
}

}  // namespace

TEST_CASE("dataset build matches the reference screen outcomes") {
  const auto& b = built();
  // the filter counts mirror the reference annotations for the sample file
  CHECK(b.stats.at("records").get<int>() == 44);
  CHECK(b.stats.at("failed_single_token").get<int>() == 3);
  CHECK(b.stats.at("failed_factual").get<int>() == 23);
  CHECK(b.stats.at("failed_span").get<int>() == 1);
  CHECK(b.stats.at("pool").get<int>() == 17);
  CHECK(b.stats.at("sampled").get<int>() == 12);
  CHECK_FALSE(b.stats.at("truncated").get<bool>());

  const mechtrace::Dataset ds = mechtrace::read_dataset(b.dataset_path);
  CHECK(ds.instances.size() == 12);
  CHECK(ds.provenance.stats.pool == 17);
  CHECK(!ds.provenance.model_sha256.empty());
}

TEST_CASE("dataset build is deterministic and worker-count independent") {
  const auto& b = built();
  testutil::TempDir tmp;
  const std::string base =
      "dataset build --counterfact " + data_path("samples/counterfact_sample.json") +
      model_args() + " --vocab " + data_path("gpt2-tokenizer/vocab.json") + " --merges " +
      data_path("gpt2-tokenizer/merges.txt") + " --n 12 --seed 7";
  const CliResult r1 = run_cli(base + " --workers 1 --out " + tmp.file("w1"), tmp, "w1");
  REQUIRE(r1.exit_code == 0);
  const CliResult r2 = run_cli(base + " --workers 3 --out " + tmp.file("w3"), tmp, "w3");
  REQUIRE(r2.exit_code == 0);
  CHECK(slurp(tmp.file("w1") + "/dataset.jsonl") == slurp(tmp.file("w3") + "/dataset.jsonl"));
  CHECK(slurp(tmp.file("w1") + "/dataset.jsonl") == slurp(b.dataset_path));

  // a different seed samples a different subset
  const std::string reseeded =
      "dataset build --counterfact " + data_path("samples/counterfact_sample.json") +
      model_args() + " --vocab " + data_path("gpt2-tokenizer/vocab.json") + " --merges " +
      data_path("gpt2-tokenizer/merges.txt") + " --n 12 --seed 8";
  const CliResult r3 = run_cli(reseeded + " --workers 2 --out " + tmp.file("s8"), tmp, "s8");
  REQUIRE(r3.exit_code == 0);
  CHECK(slurp(tmp.file("s8") + "/dataset.jsonl") != slurp(b.dataset_path));
}

TEST_CASE("trace emits CSVs with the expected shapes") {
  const auto& b = built();
  testutil::TempDir tmp;
  const CliResult r = run_cli("trace --dataset " + b.dataset_path + model_args() +
                                  " --workers 2 --lens-map --blocks --heads "
                                  "--attn-profile L1H0,L3H2 "
                                  "--rank-curves attribute --out " +
                                  tmp.file("trace"),
                              tmp, "trace");
  REQUIRE(r.exit_code == 0);

  // lens map: header + (L+1) layers x 7 groups x 2 tokens, L=4
  const std::string lens = slurp(tmp.file("trace") + "/lens_map.csv");
  CHECK(std::count(lens.begin(), lens.end(), '\n') == 1 + 5 * 7 * 2);

  const std::string blocks = slurp(tmp.file("trace") + "/block_attribution.csv");
  CHECK(std::count(blocks.begin(), blocks.end(), '\n') == 1 + 4 * 2);

  const std::string heads = slurp(tmp.file("trace") + "/head_attribution.csv");
  CHECK(std::count(heads.begin(), heads.end(), '\n') == 1 + 4 * 4);

  const std::string prof = slurp(tmp.file("trace") + "/attention_profile.csv");
  CHECK(std::count(prof.begin(), prof.end(), '\n') == 1 + 2 * 7);

  const json summary = json::parse(slurp(tmp.file("trace") + "/summary.json"));
  CHECK(summary.at("n").get<int>() == 12);
  CHECK(summary.contains("win_rates"));
  CHECK(summary.at("win_rates").contains("fact_rate"));

  const json manifest = json::parse(slurp(tmp.file("trace") + "/run_manifest.json"));
  CHECK(manifest.at("command") == "trace");
  CHECK(manifest.at("input_hashes").contains("model"));
  CHECK(manifest.at("output_hashes").contains("lens_map.csv"));
}

TEST_CASE("trace outputs are byte-identical across worker counts") {
  const auto& b = built();
  testutil::TempDir tmp;
  const std::string base = "trace --dataset " + b.dataset_path + model_args();
  REQUIRE(run_cli(base + " --workers 1 --out " + tmp.file("t1"), tmp, "t1").exit_code == 0);
  REQUIRE(run_cli(base + " --workers 4 --out " + tmp.file("t4"), tmp, "t4").exit_code == 0);
  for (const char* name :
       {"/lens_map.csv", "/block_attribution.csv", "/head_attribution.csv", "/summary.json"})
    CHECK(slurp(tmp.file("t1") + name) == slurp(tmp.file("t4") + name));
}

TEST_CASE("trace --sample 1 zeroes the variance columns") {
  const auto& b = built();
  testutil::TempDir tmp;
  const CliResult r = run_cli("trace --dataset " + b.dataset_path + model_args() +
                                  " --sample 1 --seed 3 --lens-map --out " + tmp.file("s1"),
                              tmp, "s1");
  REQUIRE(r.exit_code == 0);
  std::ifstream f(tmp.file("s1") + "/lens_map.csv");
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    // layer,group,token,mean,variance,count
    std::stringstream ss(line);
    std::string field;
    for (int i = 0; i < 4; ++i) std::getline(ss, field, ',');
    std::getline(ss, field, ',');
    std::getline(ss, line, ',');
    if (line == "0") continue;  // empty group for this instance
    CHECK(std::stod(field) == doctest::Approx(0.0));
  }
}

TEST_CASE("intervene verifies the alpha=1 no-op and runs grids") {
  const auto& b = built();
  testutil::TempDir tmp;
  const CliResult noop = run_cli("intervene --dataset " + b.dataset_path + model_args() +
                                     " --heads L1H0,L2H1 --alpha 1 --workers 2 --out " +
                                     tmp.file("noop"),
                                 tmp, "noop");
  REQUIRE(noop.exit_code == 0);
  CHECK(noop.output.find("no-op verified") != std::string::npos);
  const json rep = json::parse(slurp(tmp.file("noop") + "/intervention.json"));
  CHECK(rep.at("noop_verified").get<bool>());
  CHECK(rep.at("clean").at("fact_rate") == rep.at("edited").at("fact_rate"));

  const CliResult grid = run_cli("intervene --dataset " + b.dataset_path + model_args() +
                                     " --heads L1H0 --grid 2,5 --workers 2 --out " +
                                     tmp.file("grid"),
                                 tmp, "grid");
  REQUIRE(grid.exit_code == 0);
  const json grep = json::parse(slurp(tmp.file("grid") + "/intervention.json"));
  CHECK(grep.at("grid").size() == 2);
  CHECK((grep.at("alpha_star") == 2.0 || grep.at("alpha_star") == 5.0));

  const CliResult abl = run_cli("intervene --dataset " + b.dataset_path + model_args() +
                                    " --ablate L1H0,L2H1 --workers 2 --out " +
                                    tmp.file("abl"),
                                tmp, "abl");
  REQUIRE(abl.exit_code == 0);
  const json arep = json::parse(slurp(tmp.file("abl") + "/intervention.json"));
  CHECK(arep.at("mode") == "ablate");
  CHECK(arep.contains("ablated"));
}

TEST_CASE("similarity bins report baselines and per-bin rates") {
  const auto& b = built();
  testutil::TempDir tmp;
  const CliResult r = run_cli("similarity --dataset " + b.dataset_path + model_args() +
                                  " --embeddings " + data_path("samples/embeddings_sample.txt") +
                                  " --bins 3 --workers 2 --out " + tmp.file("sim"),
                              tmp, "sim");
  REQUIRE(r.exit_code == 0);
  const json rep = json::parse(slurp(tmp.file("sim") + "/similarity.json"));
  CHECK(rep.contains("baseline_all"));
  CHECK(rep.contains("baseline_scored"));
  REQUIRE(rep.at("bins").size() == 3);
  int64_t total = 0;
  for (const auto& bin : rep.at("bins")) total += bin.at("rates").at("n").get<int64_t>();
  total += rep.at("excluded_oov").get<int64_t>();
  CHECK(total == 12);

  const std::string csv = slurp(tmp.file("sim") + "/similarity_bins.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 3);
}

TEST_CASE("similarity without scores or embeddings is an input error") {
  const auto& b = built();
  testutil::TempDir tmp;
  const CliResult r = run_cli("similarity --dataset " + b.dataset_path + model_args() +
                                  " --out " + tmp.file("sim2"),
                              tmp, "sim2");
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("--embeddings") != std::string::npos);
}

TEST_CASE("fixtures verify passes on the committed goldens") {
  testutil::TempDir tmp;
  const CliResult r = run_cli("fixtures verify" + model_args() + " --prompts " +
                                  data_path("fixtures/golden_prompts.json") + " --golden " +
                                  data_path("fixtures/golden_logits.safetensors"),
                              tmp, "fixtures");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("PASS prompt0") != std::string::npos);
  CHECK(r.output.find("PASS prompt4") != std::string::npos);
  CHECK(r.output.find("all fixtures match") != std::string::npos);

  // an absurdly tight tolerance must fail with the numeric exit code
  const CliResult tight = run_cli("fixtures verify" + model_args() + " --prompts " +
                                      data_path("fixtures/golden_prompts.json") +
                                      " --golden " +
                                      data_path("fixtures/golden_logits.safetensors") +
                                      " --tolerance 1e-12",
                                  tmp, "tight");
  CHECK(tight.exit_code == 4);
}

TEST_CASE("input and schema failures map to category exit codes") {
  testutil::TempDir tmp;
  const CliResult missing = run_cli("trace --dataset /nonexistent.jsonl" + model_args() +
                                        " --out " + tmp.file("x"),
                                    tmp, "missing");
  CHECK(missing.exit_code == 2);

  {
    std::ofstream f(tmp.file("broken.json"));
    f << "{not json";
  }
  const CliResult schema = run_cli("dataset build --counterfact " + tmp.file("broken.json") +
                                       model_args() + " --vocab " +
                                       data_path("gpt2-tokenizer/vocab.json") + " --merges " +
                                       data_path("gpt2-tokenizer/merges.txt") +
                                       " --n 5 --seed 1 --out " + tmp.file("y"),
                                   tmp, "schema");
  CHECK(schema.exit_code == 3);

  const auto& b = built();
  const CliResult modes = run_cli("intervene --dataset " + b.dataset_path + model_args() +
                                      " --heads L1H0 --alpha 2 --ablate L1H1 --out " +
                                      tmp.file("z"),
                                  tmp, "modes");
  CHECK(modes.exit_code == 2);
}

TEST_CASE("MECHTRACE_CACHE_DIR redirects the screen cache without changing results") {
  const auto& b = built();
  testutil::TempDir tmp;
  const std::string cache = tmp.file("cache");
  const std::string base =
      "MECHTRACE_CACHE_DIR=" + cache + " " + std::string(MECHTRACE_CLI_PATH) +
      " dataset build --counterfact " + data_path("samples/counterfact_sample.json") +
      model_args() + " --vocab " + data_path("gpt2-tokenizer/vocab.json") + " --merges " +
      data_path("gpt2-tokenizer/merges.txt") + " --n 12 --seed 7 --workers 2 --out ";
  REQUIRE(std::system((base + tmp.file("c1") + " > " + tmp.file("c1.log") + " 2>&1").c_str()) == 0);
  CHECK(std::filesystem::exists(cache));
  bool has_cache_file = false;
  for (const auto& e : std::filesystem::directory_iterator(cache))
    has_cache_file = has_cache_file || e.path().extension() == ".json";
  CHECK(has_cache_file);
  // a cached second run produces byte-identical output
  REQUIRE(std::system((base + tmp.file("c2") + " > " + tmp.file("c2.log") + " 2>&1").c_str()) == 0);
  CHECK(slurp(tmp.file("c1") + "/dataset.jsonl") == slurp(tmp.file("c2") + "/dataset.jsonl"));
  CHECK(slurp(tmp.file("c1") + "/dataset.jsonl") == slurp(b.dataset_path));
}

TEST_CASE("config files provide defaults that flags override") {
  const auto& b = built();
  testutil::TempDir tmp;
  {
    std::ofstream f(tmp.file("cfg.json"));
    f << json{{"dataset", b.dataset_path},
              {"model", data_path("reference-model/model.safetensors")},
              {"model-config", data_path("reference-model/config.json")},
              {"workers", 2},
              {"heads", "L1H0"},
              {"alpha", 1.0}}
             .dump();
  }
  const CliResult r = run_cli("intervene --config " + tmp.file("cfg.json") + " --out " +
                                  tmp.file("out"),
                              tmp, "config");
  REQUIRE(r.exit_code == 0);
  const json rep = json::parse(slurp(tmp.file("out") + "/intervention.json"));
  CHECK(rep.at("noop_verified").get<bool>());

  // CLI flag overrides the config value
  const CliResult r2 = run_cli("intervene --config " + tmp.file("cfg.json") +
                                   " --alpha 2 --out " + tmp.file("out2"),
                               tmp, "config2");
  REQUIRE(r2.exit_code == 0);
  const json rep2 = json::parse(slurp(tmp.file("out2") + "/intervention.json"));
  CHECK_FALSE(rep2.contains("noop_verified"));
  CHECK(rep2.at("alpha").get<double>() == 2.0);
}
