#pragma once

#include <map>
#include <string>

#include "mechtrace/intervention.hpp"
#include "mechtrace/tracer.hpp"

namespace mechtrace {

inline constexpr const char* kToolVersion = "0.1.0";

// fixed-format numbers so identical runs serialize to identical bytes
std::string fmt_stat(double v);   // general statistic, %.6g
std::string fmt_rate(double v);   // win rate, %.4f

// one row per layer x group x token
std::string lens_map_csv(const LogitLensMap& map);
std::string block_attribution_csv(const BlockAttribution& ba);
std::string head_attribution_csv(const HeadAttribution& ha);
std::string attention_profile_csv(const HeadAttentionProfile& profile);
std::string rank_curves_csv(const RankCurves& rc);
std::string similarity_bins_csv(const std::vector<SimilarityBin>& bins,
                                const std::vector<WinRates>& per_bin);

std::string win_rates_json(const WinRates& w);  // fragment used by summaries

void write_text_file(const std::string& path, const std::string& content);

struct RunManifest {
  std::string command;
  std::string tool_version = kToolVersion;
  std::string config_hash;  // hash of the resolved invocation
  std::map<std::string, std::string> input_hashes;
  std::map<std::string, std::string> output_hashes;
  double wall_seconds = 0.0;
  std::map<std::string, double> stage_seconds;

  void write(const std::string& path) const;
};

}  // namespace mechtrace
