#include "mechtrace/reports.hpp"

#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "mechtrace/errors.hpp"

namespace mechtrace {

std::string fmt_stat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string fmt_rate(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string lens_map_csv(const LogitLensMap& map) {
  std::string out = "layer,group,token,mean,variance,count\n";
  for (int l = 0; l <= map.n_layer; ++l)
    for (int g = 0; g < SpanSet::kGroups; ++g) {
      const GroupCell& c = map.cell(l, g);
      out += std::to_string(l);
      out += ",";
      out += SpanSet::group_name(g);
      out += ",fact,";
      out += fmt_stat(c.fact.mean()) + "," + fmt_stat(c.fact.variance()) + "," +
             std::to_string(c.fact.n) + "\n";
      out += std::to_string(l);
      out += ",";
      out += SpanSet::group_name(g);
      out += ",cofa,";
      out += fmt_stat(c.cofa.mean()) + "," + fmt_stat(c.cofa.variance()) + "," +
             std::to_string(c.cofa.n) + "\n";
    }
  return out;
}

std::string block_attribution_csv(const BlockAttribution& ba) {
  std::string out = "layer,block,mean_delta_cofa,variance,count\n";
  for (size_t l = 0; l < ba.attn_delta.size(); ++l) {
    out += std::to_string(l) + ",attention," + fmt_stat(ba.attn_delta[l].mean()) + "," +
           fmt_stat(ba.attn_delta[l].variance()) + "," + std::to_string(ba.attn_delta[l].n) +
           "\n";
    out += std::to_string(l) + ",mlp," + fmt_stat(ba.mlp_delta[l].mean()) + "," +
           fmt_stat(ba.mlp_delta[l].variance()) + "," + std::to_string(ba.mlp_delta[l].n) +
           "\n";
  }
  return out;
}

std::string head_attribution_csv(const HeadAttribution& ha) {
  std::string out = "layer,head,mean_delta_cofa,variance,count\n";
  for (int l = 0; l < ha.n_layer; ++l)
    for (int h = 0; h < ha.n_head; ++h) {
      const auto& m = ha.head_delta[static_cast<size_t>(l * ha.n_head + h)];
      out += std::to_string(l) + "," + std::to_string(h) + "," + fmt_stat(m.mean()) +
             "," + fmt_stat(m.variance()) + "," + std::to_string(m.n) + "\n";
    }
  return out;
}

std::string attention_profile_csv(const HeadAttentionProfile& profile) {
  std::string out = "layer,head,group,mean_attention,variance,count\n";
  for (size_t hi = 0; hi < profile.heads.size(); ++hi)
    for (int g = 0; g < SpanSet::kGroups; ++g) {
      const auto& m = profile.at(static_cast<int>(hi), g);
      out += std::to_string(profile.heads[hi].layer) + "," +
             std::to_string(profile.heads[hi].head) + "," + SpanSet::group_name(g) +
             "," + fmt_stat(m.mean()) + "," + fmt_stat(m.variance()) + "," +
             std::to_string(m.n) + "\n";
    }
  return out;
}

std::string rank_curves_csv(const RankCurves& rc) {
  std::string out = "layer,token,mean_rank,median_rank,count\n";
  for (size_t l = 0; l < rc.fact_rank.size(); ++l) {
    out += std::to_string(l) + ",fact," + fmt_stat(rc.fact_rank[l].mean()) + "," +
           fmt_stat(rc.fact_median[l]) + "," + std::to_string(rc.fact_rank[l].n) + "\n";
    out += std::to_string(l) + ",cofa," + fmt_stat(rc.cofa_rank[l].mean()) + "," +
           fmt_stat(rc.cofa_median[l]) + "," + std::to_string(rc.cofa_rank[l].n) + "\n";
  }
  return out;
}

std::string similarity_bins_csv(const std::vector<SimilarityBin>& bins,
                                const std::vector<WinRates>& per_bin) {
  std::string out = "bin,similarity_lo,similarity_hi,count,fact_wins,fact_rate,ci_lo,ci_hi\n";
  for (size_t b = 0; b < bins.size(); ++b) {
    const auto ci = per_bin[b].fact_ci();
    out += std::to_string(b) + "," + fmt_stat(bins[b].lo) + "," + fmt_stat(bins[b].hi) +
           "," + std::to_string(per_bin[b].n) + "," + std::to_string(per_bin[b].fact_wins) +
           "," + fmt_rate(per_bin[b].fact_rate()) + "," + fmt_rate(ci.lo) + "," +
           fmt_rate(ci.hi) + "\n";
  }
  return out;
}

std::string win_rates_json(const WinRates& w) {
  nlohmann::json j = {
      {"n", w.n},
      {"fact_wins", w.fact_wins},
      {"cofa_wins", w.cofa_wins()},
      {"fact_rate", fmt_rate(w.fact_rate())},
      {"cofa_rate", fmt_rate(w.cofa_rate())},
      {"fact_ci95", {fmt_rate(w.fact_ci().lo), fmt_rate(w.fact_ci().hi)}},
      {"cofa_ci95", {fmt_rate(w.cofa_ci().lo), fmt_rate(w.cofa_ci().hi)}},
  };
  return j.dump();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write output file: " + path);
  f << content;
  if (!f) throw InputError("short write: " + path);
}

void RunManifest::write(const std::string& path) const {
  nlohmann::json j = {
      {"command", command},
      {"tool_version", tool_version},
      {"config_hash", config_hash},
      {"input_hashes", input_hashes},
      {"output_hashes", output_hashes},
      {"wall_seconds", wall_seconds},
      {"stage_seconds", stage_seconds},
  };
  write_text_file(path, j.dump(1) + "\n");
}

}  // namespace mechtrace
