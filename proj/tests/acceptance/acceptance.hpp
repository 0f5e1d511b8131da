#pragma once

#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <string>

namespace acc {

struct Outcome {
  bool pass = false;
  std::string detail;
};

inline std::string fmt(const char* f, ...) {
  char buf[2048];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

// Criteria on exact properties.
Outcome coder_losslessness();
Outcome estimate_agreement();
Outcome cross_entropy();
Outcome gradient_suite();
Outcome codebook_identity();
Outcome codebook_advantage();

// Criteria on the task world; `work` holds datasets, nets and the run cache.
struct WorldContext {
  std::filesystem::path work;
  bool verbose = true;
};
// Builds (or opens) the datasets and frozen nets under ctx.work.
void prepare_world(const WorldContext& ctx);
Outcome rd_frontier(const WorldContext& ctx);
Outcome plateau_ordering(const WorldContext& ctx);
Outcome grouping_saves_bits(const WorldContext& ctx);
Outcome transfer_asymmetry(const WorldContext& ctx);
Outcome unseen_support(const WorldContext& ctx);

}  // namespace acc
