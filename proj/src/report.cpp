#include "tck/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "tck/errors.hpp"

namespace tck {

namespace {

std::string read_all(const std::filesystem::path& p) {
  const Bytes b = read_file(p);
  return std::string(b.begin(), b.end());
}

void write_all(const std::filesystem::path& p, const std::string& text) {
  write_file_atomic(p, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

}  // namespace

std::vector<Curve> collect_curves(const std::vector<std::filesystem::path>& dirs) {
  std::vector<std::filesystem::path> files;
  for (const auto& d : dirs) {
    if (!std::filesystem::exists(d)) throw PrerequisiteError("run directory " + d.string() + " does not exist");
    if (std::filesystem::is_regular_file(d / "summary.json")) files.push_back(d / "summary.json");
    if (!std::filesystem::is_directory(d)) continue;
    for (const auto& e : std::filesystem::recursive_directory_iterator(d)) {
      if (e.is_regular_file() && e.path().filename() == "summary.json" && e.path().parent_path() != d) {
        files.push_back(e.path());
      }
    }
  }
  std::sort(files.begin(), files.end());
  files.erase(std::unique(files.begin(), files.end()), files.end());
  std::map<std::string, Curve> by_task;
  for (const auto& f : files) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_all(f));
    } catch (const nlohmann::json::exception& e) {
      throw CorruptionError("run summary " + f.string() + ": " + e.what());
    }
    if (j.value("control", false)) continue;
    std::size_t k = 0;
    for (const auto& p : j.at("ports")) {
      if (!p.at(2).get<bool>()) continue;
      const TaskSpec& sp = task_spec(static_cast<TaskId>(p.at(1).get<int>()));
      Curve& c = by_task[sp.name];
      c.task = sp.name;
      c.metric = metric_name(sp.metric);
      c.points.push_back({f.parent_path().filename().string(), j.at("lambda").get<double>(),
                          j.at("val_bpp").get<double>(), j.at("val_metric").at(k).get<double>()});
      ++k;
    }
  }
  std::vector<Curve> out;
  for (auto& [name, c] : by_task) {
    std::sort(c.points.begin(), c.points.end(), [](const CurvePoint& a, const CurvePoint& b) {
      return a.bpp != b.bpp ? a.bpp < b.bpp : a.run < b.run;
    });
    out.push_back(std::move(c));
  }
  return out;
}

ReportTable curve_table(const Curve& c) {
  ReportTable t{c.task, {"run", "lambda", "bpp", c.metric}, {}};
  for (const auto& p : c.points) t.rows.push_back({p.run, format_number(p.lambda), format_number(p.bpp), format_number(p.metric)});
  return t;
}

std::string render_svg(const Curve& c) {
  const double w = 480, h = 320, left = 60, right = 20, top = 30, bottom = 50;
  double x0 = 0.0, x1 = 0.0, y0 = 0.0, y1 = 0.0;
  if (!c.points.empty()) {
    x0 = x1 = c.points[0].bpp;
    y0 = y1 = c.points[0].metric;
    for (const auto& p : c.points) {
      x0 = std::min(x0, p.bpp);
      x1 = std::max(x1, p.bpp);
      y0 = std::min(y0, p.metric);
      y1 = std::max(y1, p.metric);
    }
  }
  // a single point still needs a non-degenerate frame
  if (x1 - x0 < 1e-12) {
    x0 -= 0.5 * std::max(std::abs(x0), 1e-3);
    x1 += 0.5 * std::max(std::abs(x1), 1e-3);
  }
  if (y1 - y0 < 1e-12) {
    y0 -= 0.5 * std::max(std::abs(y0), 1e-3);
    y1 += 0.5 * std::max(std::abs(y1), 1e-3);
  }
  const auto sx = [&](double v) { return left + (v - x0) / (x1 - x0) * (w - left - right); };
  const auto sy = [&](double v) { return h - bottom - (v - y0) / (y1 - y0) * (h - top - bottom); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
     << ' ' << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" << c.task << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    os << "<text x=\"" << fixed(sx(xv), 1) << "\" y=\"" << h - bottom + 16 << "\" text-anchor=\"middle\" font-size=\"10\">"
       << fixed(xv, 4) << "</text>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << fixed(sy(yv) + 3, 1) << "\" text-anchor=\"end\" font-size=\"10\">"
       << fixed(yv, 4) << "</text>\n";
  }
  os << "<text x=\"" << (left + w - right) / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\" font-size=\"12\">bpp</text>\n";
  os << "<text x=\"14\" y=\"" << (top + h - bottom) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 "
     << (top + h - bottom) / 2 << ")\" text-anchor=\"middle\">" << c.metric << "</text>\n";
  if (c.points.size() > 1) {
    os << "<polyline fill=\"none\" stroke=\"#1f4e9c\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < c.points.size(); ++i) {
      os << (i ? " " : "") << fixed(sx(c.points[i].bpp), 2) << ',' << fixed(sy(c.points[i].metric), 2);
    }
    os << "\"/>\n";
  }
  for (const auto& p : c.points) {
    os << "<circle cx=\"" << fixed(sx(p.bpp), 2) << "\" cy=\"" << fixed(sy(p.metric), 2)
       << "\" r=\"3\" fill=\"#1f4e9c\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<std::filesystem::path> write_report(const std::vector<Curve>& curves, const std::filesystem::path& out) {
  if (curves.empty()) throw PrerequisiteError("no rate-constrained runs found to report");
  std::filesystem::create_directories(out);
  std::vector<std::filesystem::path> written;
  for (const auto& c : curves) {
    write_all(out / (c.task + ".csv"), curve_table(c).csv());
    write_all(out / (c.task + ".svg"), render_svg(c));
    written.push_back(out / (c.task + ".csv"));
    written.push_back(out / (c.task + ".svg"));
  }
  return written;
}

}  // namespace tck
