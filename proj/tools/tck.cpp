#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tck/config.hpp"
#include "tck/errors.hpp"
#include "tck/report.hpp"
#include "tck/trainer.hpp"

namespace fs = std::filesystem;
using namespace tck;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kPrerequisite = 3, kCorrupt = 4 };

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::uint64_t> seed;
};

Settings load_settings(const Common& c) {
  Settings s;
  if (!c.config.empty()) s.load_file(c.config);
  for (const auto& o : c.overrides) s.apply_override(o);
  if (c.seed) s.set("seed", std::to_string(*c.seed));
  return s;
}

void write_text(const fs::path& p, const std::string& text) {
  write_file_atomic(p, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// Exclusive-create marker so two processes never fill the same directory.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw ConfigError("output directory " + dir.string() + " is in use by another command");
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

json input_digests(Workbench& wb, const std::vector<TaskId>& tasks) {
  json j;
  for (Split s : {Split::train, Split::val, Split::test}) j["dataset"][split_name(s)] = to_hex(wb.split(s).digest());
  for (TaskId t : tasks) j["nets"][task_spec(t).name] = to_hex(wb.net(t).digest());
  return j;
}

fs::path work_dir(const Settings& s) { return fs::path(s.get("work")); }

int cmd_dataset(const Common& c) {
  Settings s = load_settings(c);
  const fs::path work = c.out.empty() ? work_dir(s) : fs::path(c.out);
  const WorldConfig w = world_config(s);
  json manifest = {{"config", s.echo()}, {"seed", w.master_seed}};
  for (Split sp : {Split::train, Split::val, Split::test}) {
    CacheStatus st;
    std::string warning;
    const Dataset d = ensure_dataset(w, sp, work / "data", &st, &warning);
    if (!warning.empty()) std::cerr << "warning: " << warning << "\n";
    const std::string digest = to_hex(d.digest());
    std::cout << split_name(sp) << ": "
              << (st == CacheStatus::valid ? "cache valid, skipped" : st == CacheStatus::created ? "generated" : "regenerated")
              << " (" << d.count << " scenes, digest " << digest.substr(0, 16) << ")\n";
    manifest["digests"][split_name(sp)] = digest;
  }
  write_text(work / "data" / "manifest.json", manifest.dump(1) + "\n");
  return kOk;
}

int cmd_pretrain(const Common& c, const std::vector<std::string>& only) {
  Settings s = load_settings(c);
  const fs::path work = c.out.empty() ? work_dir(s) : fs::path(c.out);
  const WorkbenchConfig wc = workbench_config(s);
  Workbench wb = Workbench::open(work, wc.world);
  fs::create_directories(work / "nets");
  std::vector<TaskId> tasks;
  for (const auto& name : only) {
    for (TaskId t : parse_task_group(name)) tasks.push_back(t);
  }
  if (tasks.empty()) {
    for (const auto& sp : all_tasks()) tasks.push_back(sp.id);
  }
  ReportTable t{"pretrain", {"task", "metric", "val", "constant", "floor", "floor_met"}, {}};
  for (TaskId id : tasks) {
    const TaskSpec& sp = task_spec(id);
    PretrainReport rep;
    TaskNet net = pretrain(id, wb.split(Split::train), wb.split(Split::val), wc.net, wc.pretrain, &rep);
    net.save(Workbench::net_path(work, id));
    t.rows.push_back({sp.name, metric_name(sp.metric), format_number(rep.val.metric), format_number(rep.baseline),
                      format_number(rep.floor), rep.floor_met ? "yes" : "no"});
    std::cout << sp.name << ": val " << metric_name(sp.metric) << " " << format_number(rep.val.metric) << " (constant "
              << format_number(rep.baseline) << ", floor " << format_number(rep.floor) << ")\n";
    if (!rep.floor_met) std::cerr << "warning: " << sp.name << " missed its floor; net saved for inspection\n";
  }
  write_text(work / "nets" / "pretrain.csv", t.csv());
  return kOk;
}

int cmd_train(const Common& c) {
  Settings s = load_settings(c);
  const fs::path work = work_dir(s);
  const WorkbenchConfig wc = workbench_config(s);
  const std::vector<TaskId> tasks = parse_task_group(s.get("train.tasks"));
  ExperimentConfig exp;
  exp.codec = codec_config(s);
  exp.rd = rd_config(s);
  exp.cache_dir = c.out.empty() ? work / "runs" : fs::path(c.out);
  Workbench wb = Workbench::open(work, wc.world);
  const auto ports = same_task_ports(tasks);
  const bool control = exp.rd.control;
  const std::string key = run_key(wb, ports, exp, exp.rd.lambda, control);
  const fs::path dir = exp.cache_dir / key;
  const bool cached = fs::exists(dir / "summary.json");
  DirLock lock(dir);
  const RunSummary sum = run_once(wb, ports, exp, exp.rd.lambda, control);
  json manifest = {{"command", "train"},
                   {"config", s.echo()},
                   {"seeds", {{"master", s.get_u64("seed")}, {"codec", exp.codec.seed}, {"train", exp.rd.seed}}},
                   {"inputs", input_digests(wb, tasks)},
                   {"codec_digest", to_hex(AggregateCodec::load(dir / "codec.tckm").digest())}};
  if (exp.rd.budget_bits) manifest["budget_bits"] = *exp.rd.budget_bits;
  write_text(dir / "manifest.json", manifest.dump(1) + "\n");
  if (cached) std::cout << "run cache valid, skipped\n";
  std::cout << dir.string() << "\n";
  std::cout << "val bpp " << format_number(sum.val_bpp);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    std::cout << ", " << task_spec(tasks[i]).name << " " << format_number(sum.val_metric[i]);
  }
  std::cout << "\n";
  return kOk;
}

int cmd_plan(const Common& c) {
  Settings s = load_settings(c);
  const fs::path work = work_dir(s);
  const WorkbenchConfig wc = workbench_config(s);
  ExperimentPlan plan = plan_config(s);
  const fs::path root = c.out.empty() ? work / "plans" : fs::path(c.out);
  plan.exp.cache_dir = root / "runs";
  Workbench wb = Workbench::open(work, wc.world);
  const fs::path dir = root / s.hash();
  DirLock lock(dir);
  const auto tables = run_plan(wb, plan);
  for (const auto& t : tables) {
    write_text(dir / (t.name + ".csv"), t.csv());
    std::cout << t.csv() << "\n";
  }
  std::vector<TaskId> tasks;
  for (const auto& sp : all_tasks()) tasks.push_back(sp.id);
  json manifest = {{"command", "plan"},
                   {"kind", plan_kind_name(plan.kind)},
                   {"config", s.echo()},
                   {"seeds", {{"master", s.get_u64("seed")}, {"codec", plan.exp.codec.seed}, {"train", plan.exp.rd.seed}}},
                   {"inputs", input_digests(wb, tasks)}};
  write_text(dir / "manifest.json", manifest.dump(1) + "\n");
  std::cout << dir.string() << "\n";
  return kOk;
}

int cmd_encode(const std::string& model, const std::string& input, const std::string& out, const std::string& recon) {
  AggregateCodec codec = AggregateCodec::load(model);
  const FeatureFile f = read_feature_file(input);
  if (f.task_ids.size() != codec.ports().size()) throw ShapeError("feature file has a different task count than the model");
  for (std::size_t i = 0; i < f.task_ids.size(); ++i) {
    if (f.task_ids[i] != codec.ports()[i].spec.task_id) throw ShapeError("feature file tasks do not match model ports");
  }
  const CompressResult r = codec.compress(f.features, f.source_h, f.source_w);
  const Bytes bytes = r.stream.serialize();
  write_file_atomic(out, bytes);
  if (!recon.empty()) {
    FeatureFile rf{f.task_ids, r.reconstruction, f.source_h, f.source_w};
    write_feature_file(recon, rf);
  }
  std::printf("%.9g\n", r.stream.bpp());
  return kOk;
}

int cmd_decode(const std::string& model, const std::string& input, const std::string& out) {
  AggregateCodec codec = AggregateCodec::load(model);
  const ContainerStream stream = ContainerStream::parse(read_file(input));
  const DecompressResult r = codec.decompress(stream);
  FeatureFile f;
  for (std::uint16_t id : stream.task_ids) f.task_ids.push_back(id);
  f.features = r.features;
  f.source_h = stream.source[0];
  f.source_w = stream.source[1];
  write_file_atomic(out, serialize_feature_file(f));
  std::printf("%.9g\n", stream.bpp());
  return kOk;
}

int cmd_report(const Common& c, const std::vector<std::string>& runs) {
  if (runs.empty()) throw PrerequisiteError("report needs at least one run directory");
  std::vector<fs::path> dirs(runs.begin(), runs.end());
  const auto curves = collect_curves(dirs);
  const fs::path out = c.out.empty() ? fs::path("report") : fs::path(c.out);
  for (const auto& p : write_report(curves, out)) std::cout << p.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tck: learned multi-task feature compression toolkit"};
  app.require_subcommand(1);
  Common common;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "INI configuration file");
    sub->add_option("--set", common.overrides, "override, key=value (repeatable)")->allow_extra_args(false);
    sub->add_option("--out", common.out, "output directory");
    sub->add_option("--seed", common.seed, "master seed");
  };
  CLI::App* dataset = app.add_subcommand("dataset", "generate or validate the cached splits");
  CLI::App* pretrain = app.add_subcommand("pretrain", "pretrain and freeze the task networks");
  CLI::App* train = app.add_subcommand("train", "train one aggregate codec");
  CLI::App* plan = app.add_subcommand("plan", "run an experiment plan");
  CLI::App* encode = app.add_subcommand("encode", "compress a feature file");
  CLI::App* decode = app.add_subcommand("decode", "decompress a stream into a feature file");
  CLI::App* report = app.add_subcommand("report", "R-D curves from run directories");
  for (CLI::App* sub : {dataset, pretrain, train, plan, encode, decode, report}) add_common(sub);
  std::vector<std::string> pretrain_tasks;
  pretrain->add_option("--tasks", pretrain_tasks, "tasks to pretrain (default all)");
  std::string model, input, recon;
  for (CLI::App* sub : {encode, decode}) {
    sub->add_option("--model", model, "codec model file")->required();
    sub->add_option("--input", input, "feature file (encode) or stream (decode)")->required();
  }
  encode->add_option("--recon", recon, "also write the encoder-side reconstruction");
  std::vector<std::string> runs;
  report->add_option("runs", runs, "run or plan directories");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }
  try {
    if (dataset->parsed()) return cmd_dataset(common);
    if (pretrain->parsed()) return cmd_pretrain(common, pretrain_tasks);
    if (train->parsed()) return cmd_train(common);
    if (plan->parsed()) return cmd_plan(common);
    if (encode->parsed() || decode->parsed()) {
      if (common.out.empty()) throw ConfigError("--out is required");
      return encode->parsed() ? cmd_encode(model, input, common.out, recon) : cmd_decode(model, input, common.out);
    }
    if (report->parsed()) return cmd_report(common, runs);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const PrerequisiteError& e) {
    std::cerr << "missing prerequisite: " << e.what() << "\n";
    return kPrerequisite;
  } catch (const DigestError& e) {
    std::cerr << "digest error: " << e.what() << "\n";
    return kCorrupt;
  } catch (const VersionError& e) {
    std::cerr << "version error: " << e.what() << "\n";
    return kCorrupt;
  } catch (const CorruptionError& e) {
    std::cerr << "corrupt data: " << e.what() << "\n";
    return kCorrupt;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
