#include <chrono>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <algorithm>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "acceptance.hpp"

using namespace acc;

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work", work, "world work directory (datasets, nets, run cache)");
  app.add_option("--only", only, "criteria to run");
  CLI11_PARSE(app, argc, argv);
  const WorldContext ctx{work};
  struct Item {
    int id;
    const char* name;
    std::function<Outcome()> run;
    double budget = 0.0;  // seconds, 0 = none
    bool world = false;
  };
  const std::vector<Item> items{
      {1, "coder losslessness", coder_losslessness, 60},
      {2, "estimate/coder agreement", estimate_agreement, 120},
      {3, "cross-entropy inequality", cross_entropy},
      {4, "gradient suite", gradient_suite},
      {5, "codebook identity", codebook_identity},
      {6, "R-D frontier", [&] { return rd_frontier(ctx); }, 1800, true},
      {7, "plateau ordering", [&] { return plateau_ordering(ctx); }, 7200, true},
      {8, "codebook-hyperprior advantage", codebook_advantage},
      {9, "grouping saves bits", [&] { return grouping_saves_bits(ctx); }, 10800, true},
      {10, "transfer asymmetry", [&] { return transfer_asymmetry(ctx); }, 0, true},
      {11, "unseen-task support", [&] { return unseen_support(ctx); }, 0, true},
  };
  const std::set<int> chosen(only.begin(), only.end());
  const auto selected = [&](const Item& it) { return chosen.empty() || chosen.count(it.id) > 0; };

  // World runs are cached under --work, so a rerun is fast; runtime budgets
  // are judged on the first, uncached measurement kept in timings.json.
  const std::filesystem::path timings_path = ctx.work / "timings.json";
  nlohmann::json timings = nlohmann::json::object();
  if (std::ifstream in{timings_path}) timings = nlohmann::json::parse(in, nullptr, false);
  if (!timings.is_object()) timings = nlohmann::json::object();
  const auto save_timings = [&] {
    std::filesystem::create_directories(ctx.work);
    std::ofstream(timings_path) << timings.dump(1) << "\n";
  };

  if (std::any_of(items.begin(), items.end(), [&](const Item& it) { return it.world && selected(it); })) {
    const auto t0 = std::chrono::steady_clock::now();
    prepare_world(ctx);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << fmt("world ready (datasets and frozen nets) | %.0f s", secs) << std::endl;
  }

  int failed = 0;
  for (const auto& it : items) {
    if (!selected(it)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = it.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::string timing = fmt("%.0f s", secs);
    if (it.world) {
      const std::string key = std::to_string(it.id);
      if (!timings.contains(key)) {
        timings[key] = secs;
        save_timings();
      }
      const double first = timings[key].get<double>();
      if (first != secs) timing += fmt(" (first run %.0f s)", first);
      if (it.budget > 0 && first > it.budget) {
        o.pass = false;
        o.detail += fmt("; over the %.0f s runtime budget", it.budget);
      }
    } else if (it.budget > 0 && secs > it.budget) {
      o.pass = false;
      o.detail += fmt("; over the %.0f s runtime budget", it.budget);
    }
    if (it.budget > 0) timing += fmt(", budget %.0f s", it.budget);
    if (!o.pass) ++failed;
    std::cout << "criterion " << it.id << " [" << it.name << "]: " << (o.pass ? "PASS" : "FAIL") << " | " << o.detail
              << " | " << timing << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
