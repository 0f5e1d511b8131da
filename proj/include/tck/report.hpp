#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "tck/trainer.hpp"

namespace tck {

struct CurvePoint {
  std::string run;  // run directory name
  double lambda = 0.0;
  double bpp = 0.0;
  double metric = 0.0;
};

// Validation R-D points of one task, sorted by bpp.
struct Curve {
  std::string task;
  std::string metric;
  std::vector<CurvePoint> points;
};

// Reads every summary.json found under `dirs` (recursively) and groups the
// selected checkpoints by supervised task. Control runs carry no bpp and are
// skipped.
std::vector<Curve> collect_curves(const std::vector<std::filesystem::path>& dirs);

ReportTable curve_table(const Curve& c);
// Line plot with bpp on x and the metric on y; deterministic text.
std::string render_svg(const Curve& c);

// Writes <task>.csv and <task>.svg per curve into `out`; returns the paths.
std::vector<std::filesystem::path> write_report(const std::vector<Curve>& curves, const std::filesystem::path& out);

}  // namespace tck
