#include "tck/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "tck/errors.hpp"
#include "tck/ops.hpp"
#include "tck/rng.hpp"

namespace tck {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<int> iota_indices(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

std::vector<PortBinding> supervised_only(const std::vector<PortBinding>& ports) {
  std::vector<PortBinding> out;
  for (const auto& p : ports) {
    if (p.supervised) out.push_back(p);
  }
  return out;
}

std::vector<PortSpec> codec_ports(Workbench& wb, const std::vector<PortBinding>& ports) {
  std::vector<PortSpec> specs;
  for (const auto& p : ports) specs.push_back(wb.port_spec(p.source));
  return specs;
}

std::string json_text(const json& j) { return j.dump(1); }

json codec_config_json(const CodecConfig& c) {
  return {{"port_channels", c.port_channels},
          {"peripheral_depth", c.peripheral_depth},
          {"latent_channels", c.latent_channels},
          {"analysis_downs", c.analysis_downs},
          {"prior", c.prior == PriorKind::codebook ? "codebook" : "spatial"},
          {"codebook",
           {c.codebook.m, c.codebook.n, c.codebook.tau, c.codebook.hc, c.codebook.wc, c.codebook.coeff_hidden,
            c.codebook.predictor_width, c.codebook.hyper_downs}},
          {"spatial", {c.spatial.side_channels, c.spatial.width}},
          {"quant", {c.quant.t_min, c.quant.t_max}},
          {"precision", c.precision},
          {"seed", c.seed}};
}

json rd_config_json(const RDConfig& r) {
  return {{"weights", r.weights}, {"lr", r.lr},          {"steps", r.steps},
          {"batch", r.batch},     {"eval_every", r.eval_every}, {"quant", {r.quant.t_min, r.quant.t_max}},
          {"seed", r.seed}};
}

json summary_json(const RunSummary& s) {
  json ports = json::array();
  for (const auto& p : s.ports) {
    ports.push_back({static_cast<int>(p.source), static_cast<int>(p.target), p.supervised});
  }
  return {{"ports", ports},           {"lambda", s.lambda},           {"control", s.control},
          {"val_bpp", s.val_bpp},     {"test_bpp", s.test_bpp},       {"val_metric", s.val_metric},
          {"test_metric", s.test_metric}, {"val_loss", s.val_loss}, {"key", s.key}};
}

double json_number(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

std::vector<double> json_numbers(const json& j) {
  std::vector<double> v;
  for (const auto& x : j) v.push_back(json_number(x));
  return v;
}

RunSummary summary_from_json(const json& j) {
  RunSummary s;
  for (const auto& p : j.at("ports")) {
    s.ports.push_back({static_cast<TaskId>(p.at(0).get<int>()), static_cast<TaskId>(p.at(1).get<int>()),
                       p.at(2).get<bool>()});
  }
  s.lambda = j.at("lambda").get<double>();
  s.control = j.at("control").get<bool>();
  s.val_bpp = json_number(j.at("val_bpp"));
  s.test_bpp = json_number(j.at("test_bpp"));
  s.val_metric = json_numbers(j.at("val_metric"));
  s.test_metric = json_numbers(j.at("test_metric"));
  s.val_loss = json_numbers(j.at("val_loss"));
  s.key = j.at("key").get<std::string>();
  return s;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const std::filesystem::path& path) {
  const Bytes b = read_file(path);
  return std::string(b.begin(), b.end());
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<double> RDConfig::resolved_weights(std::size_t ports) const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw DomainError("rd config: lambda must be finite and non-negative");
  if (ports == 0) throw DomainError("rd config: no supervised ports");
  if (weights.empty()) return std::vector<double>(ports, 1.0 / static_cast<double>(ports));
  if (weights.size() != ports) {
    throw DomainError("rd config: " + std::to_string(weights.size()) + " weights for " + std::to_string(ports) +
                      " supervised ports");
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) throw DomainError("rd config: weights must be positive");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw DomainError("rd config: weights sum to " + format_number(total) + ", not 1");
  return weights;
}

double rd_loss(double rate, std::span<const double> task_losses, const RDConfig& cfg) {
  const std::vector<double> w = cfg.resolved_weights(task_losses.size());
  double d = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) d += w[i] * task_losses[i];
  return rate + cfg.lambda * d;
}

Var rd_loss(Var rate, const std::vector<Var>& task_losses, const RDConfig& cfg) {
  const std::vector<double> w = cfg.resolved_weights(task_losses.size());
  Var d = ops::scale(task_losses[0], w[0]);
  for (std::size_t i = 1; i < w.size(); ++i) d = ops::add(d, ops::scale(task_losses[i], w[i]));
  return ops::add(rate, ops::scale(d, cfg.lambda));
}

// ---------------------------------------------------------------------------

std::filesystem::path Workbench::net_path(const std::filesystem::path& dir, TaskId t) {
  return dir / "nets" / (task_spec(t).name + ".tckt");
}

Workbench Workbench::open(const std::filesystem::path& dir, const WorldConfig& world) {
  Workbench wb;
  wb.dir_ = dir;
  Dataset* slots[3] = {&wb.train_, &wb.val_, &wb.test_};
  for (Split s : {Split::train, Split::val, Split::test}) {
    const auto path = dataset_path(dir / "data", s);
    if (!std::filesystem::exists(path)) {
      throw PrerequisiteError("dataset split '" + std::string(split_name(s)) + "' missing under " +
                              (dir / "data").string() + "; run `tck dataset` first");
    }
    Dataset d = load_dataset(path);
    if (d.master_seed != world.master_seed || d.count != split_count(world, s) || d.size != world.size) {
      throw PrerequisiteError("dataset cache under " + (dir / "data").string() +
                              " was built for a different world; rerun `tck dataset`");
    }
    *slots[static_cast<int>(s)] = std::move(d);
  }
  wb.nets_.resize(kTaskCount);
  wb.feats_.assign(kTaskCount, std::vector<Tensor>(3));
  return wb;
}

Workbench Workbench::prepare(const std::filesystem::path& dir, const WorkbenchConfig& cfg, std::ostream* log) {
  Dataset splits[3];
  for (Split s : {Split::train, Split::val, Split::test}) {
    CacheStatus st;
    std::string warning;
    splits[static_cast<int>(s)] = ensure_dataset(cfg.world, s, dir / "data", &st, &warning);
    if (log && !warning.empty()) *log << "warning: " << warning << "\n";
  }
  std::filesystem::create_directories(dir / "nets");
  for (const TaskSpec& sp : all_tasks()) {
    const auto path = net_path(dir, sp.id);
    if (std::filesystem::exists(path)) continue;
    PretrainReport rep;
    TaskNet net = pretrain(sp.id, splits[0], splits[1], cfg.net, cfg.pretrain, &rep);
    net.save(path);
    if (log) {
      *log << "pretrained " << sp.name << ": val " << metric_name(sp.metric) << " " << format_number(rep.val.metric)
           << " (constant " << format_number(rep.baseline) << ", floor " << format_number(rep.floor) << ")"
           << (rep.floor_met ? "" : " FLOOR MISSED") << "\n";
    }
  }
  return open(dir, cfg.world);
}

const Dataset& Workbench::split(Split s) const {
  switch (s) {
    case Split::train: return train_;
    case Split::val: return val_;
    case Split::test: return test_;
  }
  return train_;
}

TaskNet& Workbench::net(TaskId t) {
  auto& slot = nets_.at(static_cast<std::size_t>(t));
  if (!slot) {
    const auto path = net_path(dir_, t);
    if (!std::filesystem::exists(path)) {
      throw PrerequisiteError("frozen net for task '" + task_spec(t).name + "' missing at " + path.string() +
                              "; run `tck pretrain` first");
    }
    slot = TaskNet::load(path);
    if (slot->image_size() != train_.size) throw PrerequisiteError("frozen net image size differs from the dataset");
  }
  return *slot;
}

const Tensor& Workbench::features(TaskId t, Split s) {
  Tensor& slot = feats_.at(static_cast<std::size_t>(t)).at(static_cast<std::size_t>(s));
  if (slot.numel() == 0) {
    TaskNet& n = net(t);
    const Dataset& d = split(s);
    const Shape fs = n.feature_shape();
    slot = Tensor({d.count, fs[0], fs[1], fs[2]});
    const std::size_t per = shape_numel(fs);
    for (int start = 0; start < d.count; start += 64) {
      std::vector<int> idx;
      for (int i = start; i < std::min(d.count, start + 64); ++i) idx.push_back(i);
      const Tensor f = n.encode(gather_batch(d.images, idx));
      std::copy(f.values().begin(), f.values().end(), slot.data() + static_cast<std::size_t>(start) * per);
    }
  }
  return slot;
}

PortSpec Workbench::port_spec(TaskId t) {
  const Shape fs = net(t).feature_shape();
  return {static_cast<int>(t), fs[0], fs[1], fs[2]};
}

std::vector<PortBinding> same_task_ports(const std::vector<TaskId>& tasks) {
  std::vector<PortBinding> out;
  for (TaskId t : tasks) out.push_back({t, t, true});
  return out;
}

// ---------------------------------------------------------------------------

Var training_objective(Graph& g, AggregateCodec& codec, Workbench& wb, const std::vector<PortBinding>& ports,
                       const RDConfig& cfg, const std::vector<int>& indices, std::uint64_t noise_seed,
                       double* rate_out, double* distortion_out) {
  const Dataset& train = wb.split(Split::train);
  std::vector<Var> feats;
  for (const auto& p : ports) feats.push_back(g.constant(gather_batch(wb.features(p.source, Split::train), indices)));
  Var z = codec.analyze(g, feats);
  Var rate;
  Rng rng(noise_seed);
  // the control group keeps the quantiser, only the rate term goes
  Var z_tilde = ops::add_uniform_noise(z, rng);
  if (cfg.control) {
    rate = g.constant(Tensor::scalar(0.0));
  } else {
    RateTerms rt = rate_terms(g, codec.prior(), z_tilde, cfg.quant, &rng);
    const double pixels = static_cast<double>(indices.size()) * train.size * train.size;
    rate = ops::scale(ops::add(rt.side_bits, rt.latent_bits), 1.0 / pixels);
  }
  const std::vector<Var> outs = codec.synthesize(g, z_tilde);
  std::vector<Var> losses;
  for (std::size_t i = 0; i < ports.size(); ++i) {
    if (!ports[i].supervised) continue;
    TaskNet& net = wb.net(ports[i].target);
    const TaskBatch tb = task_batch(train, ports[i].target, indices);
    losses.push_back(net.loss(g, net.decode(g, outs[i]), tb));
  }
  RDConfig eff = cfg;
  if (cfg.control) eff.lambda = 1.0;
  const std::vector<double> w = eff.resolved_weights(losses.size());
  Var d = ops::scale(losses[0], w[0]);
  for (std::size_t i = 1; i < w.size(); ++i) d = ops::add(d, ops::scale(losses[i], w[i]));
  Var dist = ops::scale(d, eff.lambda);
  if (rate_out) *rate_out = rate.value()[0];
  if (distortion_out) *distortion_out = dist.value()[0];
  return ops::add(rate, dist);
}

EvalSummary evaluate_codec(AggregateCodec& codec, Workbench& wb, const std::vector<PortBinding>& ports,
                           const RDConfig& cfg, Split split, int batch) {
  const Dataset& d = wb.split(split);
  const std::vector<PortBinding> sup = supervised_only(ports);
  std::vector<Evaluator> evs;
  for (const auto& p : sup) evs.emplace_back(p.target);
  double bits = 0.0;
  for (int start = 0; start < d.count; start += batch) {
    std::vector<int> idx;
    for (int i = start; i < std::min(d.count, start + batch); ++i) idx.push_back(i);
    Graph g(false);
    std::vector<Var> feats;
    for (const auto& p : ports) feats.push_back(g.constant(gather_batch(wb.features(p.source, split), idx)));
    Var z = codec.analyze(g, feats);
    Var z_hat = ops::round_hard(z, cfg.quant.t_min, cfg.quant.t_max);
    if (!cfg.control) {
      RateTerms rt = rate_terms(g, codec.prior(), z_hat, cfg.quant, nullptr);
      bits += rt.side_bits.value()[0] + rt.latent_bits.value()[0];
    }
    const std::vector<Var> outs = codec.synthesize(g, z_hat);
    std::size_t k = 0;
    for (std::size_t i = 0; i < ports.size(); ++i) {
      if (!ports[i].supervised) continue;
      TaskNet& net = wb.net(ports[i].target);
      const TaskBatch tb = task_batch(d, ports[i].target, idx);
      Var out = net.decode(g, outs[i]);
      evs[k++].add(out.value(), tb, net.loss(g, out, tb).value()[0]);
    }
  }
  EvalSummary s;
  for (const auto& e : evs) s.tasks.push_back(e.result());
  const std::vector<double> w = cfg.resolved_weights(sup.size());
  double dist = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) dist += w[i] * s.tasks[i].loss;
  if (cfg.control) {
    s.bpp = kNaN;
    s.cost = dist;
  } else {
    s.bpp = bits / (static_cast<double>(d.count) * d.size * d.size);
    s.cost = s.bpp + cfg.lambda * dist;
  }
  return s;
}

double coded_bpp(AggregateCodec& codec, Workbench& wb, const std::vector<PortBinding>& ports, Split split, int limit) {
  const Dataset& d = wb.split(split);
  const int n = std::min(limit, d.count);
  if (n <= 0) throw DomainError("coded_bpp: no items");
  double bits = 0.0;
  for (int i = 0; i < n; ++i) {
    std::vector<Tensor> f;
    for (const auto& p : ports) f.push_back(batch_item(wb.features(p.source, split), i));
    bits += static_cast<double>(codec.compress(f, d.size, d.size).stream.payload_bits());
  }
  return bits / (static_cast<double>(n) * d.size * d.size);
}

int RunRecord::select() const {
  int best = -1;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    const double c = checkpoints[i].val_cost;
    if (!std::isfinite(c)) continue;
    if (best < 0 || c < checkpoints[static_cast<std::size_t>(best)].val_cost) best = static_cast<int>(i);
  }
  return best;
}

RunRecord train(AggregateCodec& codec, Workbench& wb, const std::vector<PortBinding>& ports, const RDConfig& cfg) {
  if (ports.empty()) throw DomainError("train: no ports");
  const std::vector<PortBinding> sup = supervised_only(ports);
  cfg.resolved_weights(sup.size());
  if (cfg.steps <= 0 || cfg.batch <= 0 || cfg.eval_every <= 0) throw DomainError("train: steps, batch and eval_every must be positive");
  RunRecord rec;
  for (const auto& p : sup) rec.tasks.push_back(task_spec(p.target).name);
  rec.lambda = cfg.lambda;
  rec.control = cfg.control;

  Adam opt(codec.parameters(), AdamConfig{cfg.lr});
  const int n = wb.split(Split::train).count;
  std::vector<int> order = iota_indices(n);
  std::size_t cursor = order.size();
  Rng shuffle(mix_seed(cfg.seed, 0x7261u));
  std::optional<AggregateCodec> best;
  double best_cost = std::numeric_limits<double>::infinity();

  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<int> idx;
    while (static_cast<int>(idx.size()) < cfg.batch) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.next() % i]);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    opt.zero_grad();
    Graph g;
    double rate = 0.0, dist = 0.0;
    Var loss = training_objective(g, codec, wb, ports, cfg, idx, mix_seed(cfg.seed, static_cast<std::uint64_t>(step)),
                                  &rate, &dist);
    const double lv = loss.value()[0];
    if (!std::isfinite(lv)) {
      rec.diverged = true;
      break;
    }
    g.backward(loss);
    opt.step();
    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      const EvalSummary ev = evaluate_codec(codec, wb, ports, cfg, Split::val);
      Checkpoint c;
      c.step = step;
      c.train_loss = lv;
      c.train_rate = rate;
      c.train_distortion = dist;
      c.val_bpp = ev.bpp;
      c.val_cost = ev.cost;
      for (const auto& t : ev.tasks) {
        c.val_loss.push_back(t.loss);
        c.val_metric.push_back(t.metric);
      }
      rec.checkpoints.push_back(c);
      if (std::isfinite(ev.cost) && ev.cost < best_cost) {
        best_cost = ev.cost;
        best = codec;
      }
    }
  }
  rec.selected = rec.select();
  if (best) codec = *best;
  return rec;
}

void RunRecord::write_csv(const std::filesystem::path& path) const {
  std::ostringstream os;
  os << "step,train_loss,train_rate,train_distortion,val_bpp,val_cost";
  for (const auto& t : tasks) os << ",loss_" << t << ",metric_" << t;
  os << ",selected\n";
  os << std::setprecision(17);
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    const Checkpoint& c = checkpoints[i];
    os << c.step << ',' << c.train_loss << ',' << c.train_rate << ',' << c.train_distortion << ',' << c.val_bpp << ','
       << c.val_cost;
    for (std::size_t k = 0; k < tasks.size(); ++k) os << ',' << c.val_loss[k] << ',' << c.val_metric[k];
    os << ',' << (static_cast<int>(i) == selected ? 1 : 0) << '\n';
  }
  write_text(path, os.str());
}

RunRecord RunRecord::read_csv(const std::filesystem::path& path) {
  std::istringstream is(read_text(path));
  std::string line;
  if (!std::getline(is, line)) throw CorruptionError("run record: empty file " + path.string());
  RunRecord r;
  {
    std::istringstream hs(line);
    std::string col;
    while (std::getline(hs, col, ',')) {
      if (col.starts_with("loss_")) r.tasks.push_back(col.substr(5));
    }
  }
  const auto num = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw CorruptionError("run record: bad number '" + s + "'");
      return v;
    } catch (const std::logic_error&) {
      throw CorruptionError("run record: bad number '" + s + "'");
    }
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7 + 2 * r.tasks.size()) throw CorruptionError("run record: ragged row");
    Checkpoint c;
    c.step = static_cast<int>(num(cells[0]));
    c.train_loss = num(cells[1]);
    c.train_rate = num(cells[2]);
    c.train_distortion = num(cells[3]);
    c.val_bpp = num(cells[4]);
    c.val_cost = num(cells[5]);
    for (std::size_t k = 0; k < r.tasks.size(); ++k) {
      c.val_loss.push_back(num(cells[6 + 2 * k]));
      c.val_metric.push_back(num(cells[7 + 2 * k]));
    }
    if (cells.back() == "1") r.selected = static_cast<int>(r.checkpoints.size());
    r.checkpoints.push_back(c);
  }
  return r;
}

// ---------------------------------------------------------------------------

bool meets_target(const TaskSpec& spec, double metric, double target, double tol) {
  if (std::isinf(tol)) return true;
  if (!std::isfinite(metric)) return false;
  if (spec.higher_is_better) return metric >= target * (1.0 - tol);
  return metric <= target * (1.0 + tol);
}

std::string run_key(Workbench& wb, const std::vector<PortBinding>& ports, const ExperimentConfig& cfg, double lambda,
                    bool control) {
  json ports_j = json::array();
  json nets = json::array();
  for (const auto& p : ports) {
    ports_j.push_back({static_cast<int>(p.source), static_cast<int>(p.target), p.supervised});
    nets.push_back(to_hex(wb.net(p.source).digest()));
    nets.push_back(to_hex(wb.net(p.target).digest()));
  }
  const Dataset& tr = wb.split(Split::train);
  const json j = {{"ports", ports_j},
                  {"lambda", control ? 0.0 : lambda},
                  {"control", control},
                  {"codec", codec_config_json(cfg.codec)},
                  {"rd", rd_config_json(cfg.rd)},
                  {"world", {tr.master_seed, tr.count, wb.split(Split::val).count, wb.split(Split::test).count, tr.size}},
                  {"nets", nets}};
  const std::string text = j.dump();
  return to_hex(sha256(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()))).substr(0, 20);
}

RunSummary run_once(Workbench& wb, const std::vector<PortBinding>& ports, const ExperimentConfig& cfg, double lambda,
                    bool control, AggregateCodec* codec_out) {
  const std::string key = run_key(wb, ports, cfg, lambda, control);
  const std::filesystem::path dir = cfg.cache_dir.empty() ? std::filesystem::path() : cfg.cache_dir / key;
  if (!dir.empty() && std::filesystem::exists(dir / "summary.json") && std::filesystem::exists(dir / "codec.tckm")) {
    try {
      RunSummary s = summary_from_json(json::parse(read_text(dir / "summary.json")));
      if (codec_out) *codec_out = AggregateCodec::load(dir / "codec.tckm");
      return s;
    } catch (const json::exception&) {
      // fall through and retrain over a damaged cache entry
    } catch (const CorruptionError&) {
    }
  }
  RDConfig rd = cfg.rd;
  rd.lambda = control ? 0.0 : lambda;
  rd.control = control;
  CodecConfig cc = cfg.codec;
  AggregateCodec codec(codec_ports(wb, ports), cc);
  const RunRecord rec = train(codec, wb, ports, rd);
  if (rec.selected < 0) throw DomainError("run diverged before its first checkpoint");
  RunSummary s;
  s.ports = ports;
  s.lambda = rd.lambda;
  s.control = control;
  s.key = key;
  const EvalSummary val = evaluate_codec(codec, wb, ports, rd, Split::val);
  const EvalSummary test = evaluate_codec(codec, wb, ports, rd, Split::test);
  s.val_bpp = val.bpp;
  s.test_bpp = test.bpp;
  for (const auto& t : val.tasks) {
    s.val_metric.push_back(t.metric);
    s.val_loss.push_back(t.loss);
  }
  for (const auto& t : test.tasks) s.test_metric.push_back(t.metric);
  if (!dir.empty()) {
    std::filesystem::create_directories(dir);
    rec.write_csv(dir / "record.csv");
    codec.save(dir / "codec.tckm");
    json manifest = {{"codec", codec_config_json(cc)}, {"rd", rd_config_json(rd)}, {"lambda", rd.lambda}};
    write_text(dir / "manifest.json", json_text(manifest));
    write_text(dir / "summary.json", json_text(summary_json(s)));
  }
  if (codec_out) *codec_out = std::move(codec);
  return s;
}

std::vector<double> native_targets(Workbench& wb, const std::vector<TaskId>& tasks, const ExperimentConfig& cfg) {
  std::vector<double> out;
  for (TaskId t : tasks) out.push_back(run_once(wb, same_task_ports({t}), cfg, 0.0, true).val_metric.at(0));
  return out;
}

PlateauResult plateau_search(Workbench& wb, const std::vector<PortBinding>& ports, const ExperimentConfig& cfg,
                             std::optional<std::vector<double>> targets) {
  if (cfg.lambda_grid.empty()) throw DomainError("plateau_search: empty lambda grid");
  PlateauResult res;
  res.control = run_once(wb, ports, cfg, 0.0, true);
  const std::vector<double> goal = targets ? *targets : res.control.val_metric;
  const std::vector<PortBinding> sup = supervised_only(ports);
  if (goal.size() != sup.size()) throw DomainError("plateau_search: one target per supervised port required");
  const auto passes = [&](const RunSummary& r) {
    for (std::size_t i = 0; i < sup.size(); ++i) {
      const TaskSpec& sp = task_spec(sup[i].target);
      if (!meets_target(sp, r.val_metric[i], goal[i], sp.higher_is_better ? cfg.tol_up : cfg.tol_down)) return false;
    }
    return true;
  };
  std::vector<double> grid = cfg.lambda_grid;
  std::sort(grid.begin(), grid.end());
  int first = -1;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    res.frontier.push_back(run_once(wb, ports, cfg, grid[k], false));
    if (passes(res.frontier.back())) {
      first = static_cast<int>(k);
      break;
    }
  }
  if (first < 0) {
    res.attained = false;
    res.best = res.frontier.back();
    return res;
  }
  if (first > 0) {
    double lo = grid[static_cast<std::size_t>(first) - 1], hi = grid[static_cast<std::size_t>(first)];
    for (int i = 0; i < cfg.bisect_steps; ++i) {
      const double mid = std::sqrt(lo * hi);
      res.frontier.push_back(run_once(wb, ports, cfg, mid, false));
      (passes(res.frontier.back()) ? hi : lo) = mid;
    }
  }
  res.attained = true;
  const RunSummary* best = nullptr;
  for (const auto& r : res.frontier) {
    if (passes(r) && (best == nullptr || r.val_bpp < best->val_bpp)) best = &r;
  }
  res.best = *best;
  return res;
}

// ---------------------------------------------------------------------------

namespace {

Network external_decoder(const CodecConfig& cc, int feature_channels, std::uint64_t seed) {
  std::vector<LayerDesc> layers;
  int c = cc.latent_channels;
  for (int i = 0; i < cc.analysis_downs; ++i) {
    const int out = i + 1 == cc.analysis_downs ? feature_channels : std::max(feature_channels, c / 2);
    layers.push_back({LayerKind::deconv2, c, out});
    layers.push_back({LayerKind::relu});
    c = out;
  }
  layers.push_back({LayerKind::conv1x1, c, feature_channels});
  return Network("external", layers, seed);
}

Var external_features(Graph& g, Network& ext, Var z_hat, const Shape& fs) {
  Var x = ext.apply(g, z_hat);
  if (x.shape()[2] != fs[1] || x.shape()[3] != fs[2]) x = ops::resample_bilinear(x, fs[1], fs[2]);
  return x;
}

}  // namespace

const char* unseen_mode_name(UnseenMode m) {
  switch (m) {
    case UnseenMode::internal: return "Internal";
    case UnseenMode::external: return "External";
    case UnseenMode::source_plus: return "Source+";
  }
  return "?";
}

UnseenResult run_unseen(Workbench& wb, UnseenMode mode, TaskId unseen, const std::vector<TaskId>& supervision,
                        const ExperimentConfig& cfg, double lambda, int external_steps) {
  for (TaskId t : supervision) {
    if (t == unseen) throw DomainError("run_unseen: the unseen task cannot supervise its own codec");
  }
  std::vector<PortBinding> ports = same_task_ports(supervision);
  if (mode == UnseenMode::source_plus) ports.push_back({unseen, unseen, false});
  UnseenResult res;
  res.mode = mode;
  AggregateCodec codec(codec_ports(wb, ports), cfg.codec);
  res.stage1 = run_once(wb, ports, cfg, lambda, false, &codec);
  res.val_bpp = res.stage1.val_bpp;
  res.test_bpp = res.stage1.test_bpp;

  // stage 2: codec frozen, quantised latents fixed
  const QuantSpec q = cfg.rd.quant;
  const auto latents = [&](Split s) {
    const Dataset& d = wb.split(s);
    std::vector<Tensor> feats;
    for (const auto& p : ports) feats.push_back(wb.features(p.source, s));
    Tensor z = codec.aggregate_analyze(feats);
    for (double& v : z.storage()) v = std::clamp(std::nearbyint(v), static_cast<double>(q.t_min), static_cast<double>(q.t_max));
    (void)d;
    return z;
  };
  const Tensor z_train = latents(Split::train), z_val = latents(Split::val), z_test = latents(Split::test);
  TaskNet& net = wb.net(unseen);
  const Shape fs = net.feature_shape();
  Network ext = external_decoder(cfg.codec, fs[0], mix_seed(cfg.rd.seed, 0x657874u));
  Adam opt(parameter_ptrs(ext), AdamConfig{cfg.rd.lr});
  const auto evaluate = [&](const Tensor& z, Split s) {
    const Dataset& d = wb.split(s);
    Evaluator ev(unseen);
    for (int start = 0; start < d.count; start += 64) {
      std::vector<int> idx;
      for (int i = start; i < std::min(d.count, start + 64); ++i) idx.push_back(i);
      Graph g(false);
      Var out = net.decode(g, external_features(g, ext, g.constant(gather_batch(z, idx)), fs));
      const TaskBatch tb = task_batch(d, unseen, idx);
      ev.add(out.value(), tb, net.loss(g, out, tb).value()[0]);
    }
    return ev.result();
  };
  const Dataset& train = wb.split(Split::train);
  std::vector<int> order = iota_indices(train.count);
  std::size_t cursor = order.size();
  Rng shuffle(mix_seed(cfg.rd.seed, 0x756e73u));
  double best_loss = std::numeric_limits<double>::infinity();
  Network best = ext;
  for (int step = 1; step <= external_steps; ++step) {
    std::vector<int> idx;
    while (static_cast<int>(idx.size()) < cfg.rd.batch) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.next() % i]);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    opt.zero_grad();
    Graph g;
    Var out = net.decode(g, external_features(g, ext, g.constant(gather_batch(z_train, idx)), fs));
    Var l = net.loss(g, out, task_batch(train, unseen, idx));
    if (!std::isfinite(l.value()[0])) break;
    g.backward(l);
    opt.step();
    if (step % cfg.rd.eval_every == 0 || step == external_steps) {
      const EvalResult r = evaluate(z_val, Split::val);
      if (r.loss < best_loss) {
        best_loss = r.loss;
        best = ext;
      }
    }
  }
  ext = best;
  res.val_metric = evaluate(z_val, Split::val).metric;
  res.test_metric = evaluate(z_test, Split::test).metric;
  return res;
}

// ---------------------------------------------------------------------------

const char* plan_kind_name(PlanKind k) {
  switch (k) {
    case PlanKind::plateau: return "plateau";
    case PlanKind::rd_sweep: return "rd_sweep";
    case PlanKind::grouping: return "grouping";
    case PlanKind::transfer: return "transfer";
    case PlanKind::unseen: return "unseen";
  }
  return "?";
}

PlanKind plan_kind_from_name(const std::string& name) {
  for (PlanKind k : {PlanKind::plateau, PlanKind::rd_sweep, PlanKind::grouping, PlanKind::transfer, PlanKind::unseen}) {
    if (name == plan_kind_name(k)) return k;
  }
  throw DomainError("unknown plan kind '" + name + "'");
}

std::string format_number(double v) {
  if (std::isnan(v)) return "n/a";
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

std::string ReportTable::csv() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
  os << "\n";
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
    os << "\n";
  }
  return os.str();
}

void validate_plan(const ExperimentPlan& plan) {
  const auto nonempty_groups = [](const std::vector<std::vector<TaskId>>& gs, const char* what) {
    if (gs.empty()) throw DomainError(std::string(what) + ": no task groups");
    for (const auto& g : gs) {
      if (g.empty()) throw DomainError(std::string(what) + ": empty task group");
      for (std::size_t i = 0; i < g.size(); ++i) {
        for (std::size_t j = i + 1; j < g.size(); ++j) {
          if (g[i] == g[j]) throw DomainError(std::string(what) + ": task repeated within a group");
        }
      }
    }
  };
  switch (plan.kind) {
    case PlanKind::plateau:
    case PlanKind::rd_sweep: nonempty_groups(plan.groups, plan_kind_name(plan.kind)); break;
    case PlanKind::grouping: {
      if (plan.schemes.empty()) throw DomainError("grouping: no schemes");
      std::vector<TaskId> ref;
      for (const auto& s : plan.schemes) {
        nonempty_groups(s.groups, "grouping");
        std::vector<TaskId> all;
        for (const auto& g : s.groups) all.insert(all.end(), g.begin(), g.end());
        std::sort(all.begin(), all.end());
        if (std::adjacent_find(all.begin(), all.end()) != all.end()) {
          throw DomainError("grouping: scheme '" + s.name + "' assigns a task twice");
        }
        if (ref.empty()) ref = all;
        if (all != ref) throw DomainError("grouping: scheme '" + s.name + "' covers different tasks");
      }
      break;
    }
    case PlanKind::transfer:
      if (plan.transfer_pairs.empty()) throw DomainError("transfer: no source/target pairs");
      break;
    case PlanKind::unseen:
      for (const auto* g : {&plan.internal_group, &plan.external_group}) {
        if (g->empty()) throw DomainError("unseen: empty supervision group");
        if (std::find(g->begin(), g->end(), plan.unseen) != g->end()) {
          throw DomainError("unseen: the unseen task appears in a supervision group");
        }
      }
      break;
  }
  if (plan.exp.lambda_grid.empty()) throw DomainError("plan: empty lambda grid");
  for (double l : plan.exp.lambda_grid) {
    if (!(l > 0.0)) throw DomainError("plan: lambda grid entries must be positive");
  }
}

namespace {

std::string join_tasks(const std::vector<TaskId>& g) {
  std::string s;
  for (TaskId t : g) s += (s.empty() ? "" : "+") + task_spec(t).name;
  return s;
}

}  // namespace

std::vector<ReportTable> run_plan(Workbench& wb, const ExperimentPlan& plan) {
  validate_plan(plan);
  std::vector<ReportTable> out;
  switch (plan.kind) {
    case PlanKind::plateau: {
      ReportTable t{"plateau", {"Task", "Method", "Val Perf", "Val bpp", "Test Perf", "Test bpp"}, {}};
      for (const auto& g : plan.groups) {
        const PlateauResult r = plateau_search(wb, same_task_ports(g), plan.exp);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::string name = task_spec(g[i]).name;
          t.rows.push_back({name, "Control", format_number(r.control.val_metric[i]), "n/a",
                            format_number(r.control.test_metric[i]), "n/a"});
          t.rows.push_back({name, r.attained ? "Plateau" : "Plateau (unattained)", format_number(r.best.val_metric[i]),
                            format_number(r.best.val_bpp), format_number(r.best.test_metric[i]),
                            format_number(r.best.test_bpp)});
        }
      }
      out.push_back(std::move(t));
      break;
    }
    case PlanKind::rd_sweep: {
      for (const auto& g : plan.groups) {
        ReportTable t{"rd_sweep_" + join_tasks(g), {"lambda", "val_bpp", "test_bpp"}, {}};
        for (TaskId id : g) {
          t.columns.push_back("val_" + task_spec(id).name);
          t.columns.push_back("test_" + task_spec(id).name);
        }
        std::vector<double> grid = plan.exp.lambda_grid;
        std::sort(grid.begin(), grid.end());
        for (double l : grid) {
          const RunSummary r = run_once(wb, same_task_ports(g), plan.exp, l, false);
          std::vector<std::string> row = {format_number(l), format_number(r.val_bpp), format_number(r.test_bpp)};
          for (std::size_t i = 0; i < g.size(); ++i) {
            row.push_back(format_number(r.val_metric[i]));
            row.push_back(format_number(r.test_metric[i]));
          }
          t.rows.push_back(std::move(row));
        }
        out.push_back(std::move(t));
      }
      break;
    }
    case PlanKind::grouping: {
      std::vector<TaskId> tasks;
      for (const auto& g : plan.schemes.front().groups) tasks.insert(tasks.end(), g.begin(), g.end());
      std::sort(tasks.begin(), tasks.end());
      ReportTable t{"grouping", {"Task", "Metric", "Original", "Control Group"}, {}};
      for (const auto& s : plan.schemes) t.columns.push_back(s.name);
      std::vector<std::vector<std::string>> rows;
      for (TaskId id : tasks) {
        const TaskSpec& sp = task_spec(id);
        const EvalResult orig = evaluate_net(wb.net(id), wb.split(Split::val));
        const RunSummary ctl = run_once(wb, same_task_ports({id}), plan.exp, 0.0, true);
        rows.push_back({sp.name, metric_name(sp.metric), format_number(orig.metric), format_number(ctl.val_metric[0])});
      }
      std::vector<std::string> total = {"Total Bit-Rate", "Bpp Sum", "/", "/"};
      for (const auto& s : plan.schemes) {
        double bpp = 0.0;
        bool attained = true;
        std::vector<std::string> cells(tasks.size());
        for (const auto& g : s.groups) {
          const PlateauResult r = plateau_search(wb, same_task_ports(g), plan.exp, native_targets(wb, g, plan.exp));
          attained = attained && r.attained;
          bpp += r.best.val_bpp;
          for (std::size_t i = 0; i < g.size(); ++i) {
            const auto pos = std::find(tasks.begin(), tasks.end(), g[i]) - tasks.begin();
            cells[static_cast<std::size_t>(pos)] = format_number(r.best.val_metric[i]);
          }
        }
        for (std::size_t i = 0; i < tasks.size(); ++i) rows[i].push_back(cells[i]);
        total.push_back(format_number(bpp) + (attained ? "" : " (unattained)"));
      }
      t.rows = std::move(rows);
      t.rows.push_back(std::move(total));
      out.push_back(std::move(t));
      break;
    }
    case PlanKind::transfer: {
      ReportTable t{"transfer",
                    {"Source", "Target", "Native Perf", "Val Perf", "Val bpp", "Test Perf", "Test bpp", "Attained"},
                    {}};
      for (const auto& [src, dst] : plan.transfer_pairs) {
        const RunSummary native = run_once(wb, same_task_ports({dst}), plan.exp, 0.0, true);
        const PlateauResult r = plateau_search(wb, {{src, dst, true}}, plan.exp, native.val_metric);
        t.rows.push_back({task_spec(src).name, task_spec(dst).name, format_number(native.val_metric[0]),
                          format_number(r.best.val_metric[0]), format_number(r.best.val_bpp),
                          format_number(r.best.test_metric[0]), format_number(r.best.test_bpp),
                          r.attained ? "yes" : "no"});
      }
      out.push_back(std::move(t));
      break;
    }
    case PlanKind::unseen: {
      ReportTable t{"unseen", {"Representation", "Unseen Task", "Supervision", "Val bpp", "Val Perf", "Test bpp", "Test Perf"}, {}};
      const EvalResult orig = evaluate_net(wb.net(plan.unseen), wb.split(Split::val));
      t.rows.push_back({"Original", task_spec(plan.unseen).name, "/", "/", format_number(orig.metric), "/", "/"});
      for (UnseenMode m : {UnseenMode::internal, UnseenMode::external, UnseenMode::source_plus}) {
        const auto& group = m == UnseenMode::external ? plan.external_group : plan.internal_group;
        const UnseenResult r =
            run_unseen(wb, m, plan.unseen, group, plan.exp, plan.unseen_lambda, plan.external_steps);
        t.rows.push_back({unseen_mode_name(m), task_spec(plan.unseen).name, join_tasks(group), format_number(r.val_bpp),
                          format_number(r.val_metric), format_number(r.test_bpp), format_number(r.test_metric)});
      }
      out.push_back(std::move(t));
      break;
    }
  }
  return out;
}

}  // namespace tck
