#include "tck/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include <CLI11.hpp>

#include "tck/errors.hpp"
#include "tck/rng.hpp"

namespace tck {

namespace {

const std::map<std::string, std::string>& defaults() {
  static const std::map<std::string, std::string> d = {
      {"seed", "2024"},
      {"work", "work"},
      {"world.size", "32"},
      {"world.train", "4096"},
      {"world.val", "256"},
      {"world.test", "256"},
      {"net.base_channels", "16"},
      {"net.feature_channels", "16"},
      {"pretrain.steps", "2000"},
      {"pretrain.batch", "16"},
      {"pretrain.lr", "0.003"},
      {"pretrain.class_floor", "0.8"},
      {"pretrain.seg_floor", "0.5"},
      {"pretrain.regression_ratio", "0.5"},
      {"codec.port_channels", "8"},
      {"codec.peripheral_depth", "2"},
      {"codec.latent_channels", "64"},
      {"codec.analysis_downs", "2"},
      {"codec.prior", "codebook"},
      {"codec.codebook_m", "64"},
      {"codec.codebook_n", "32"},
      {"codec.codebook_tau", "64"},
      {"codec.codebook_extent", "16"},
      {"codec.coeff_hidden", "128"},
      {"codec.predictor_width", "64"},
      {"codec.hyper_downs", "1"},
      {"codec.spatial_side_channels", "16"},
      {"codec.spatial_width", "64"},
      {"codec.precision", "16"},
      {"codec.t_min", "-127"},
      {"codec.t_max", "127"},
      {"train.tasks", "scene"},
      {"train.lambda", "1"},
      {"train.weights", ""},
      {"train.lr", "0.001"},
      {"train.steps", "20000"},
      {"train.batch", "16"},
      {"train.eval_every", "250"},
      {"train.budget_bits", ""},
      {"train.control", "false"},
      {"plan.kind", "plateau"},
      {"plan.groups", "scene,surface"},
      {"plan.schemes", ""},
      {"plan.pairs", ""},
      {"plan.lambda_grid", "0.01,0.1,1,10,100"},
      {"plan.bisect_steps", "3"},
      {"plan.tol_up", "0.02"},
      {"plan.tol_down", "0.05"},
      {"plan.unseen", "object"},
      {"plan.internal", "scene+segment"},
      {"plan.external", "surface+curvature"},
      {"plan.unseen_lambda", "10"},
      {"plan.external_steps", "1500"},
  };
  return d;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(trim(cur));
  return out;
}

}  // namespace

Settings::Settings() : values_(defaults()) {}

std::vector<std::string> Settings::known_keys() {
  std::vector<std::string> k;
  for (const auto& [key, v] : defaults()) k.push_back(key);
  return k;
}

void Settings::set(const std::string& key, const std::string& value) {
  if (!defaults().count(key)) throw ConfigError("unknown configuration key '" + key + "'");
  values_[key] = trim(value);
}

void Settings::load_text(const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_config(is);
  } catch (const CLI::Error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  for (const auto& item : items) {
    // CLI11 reports section headers as bare "++" / "--" markers
    if (item.name == "++" || item.name == "--") continue;
    std::string key = item.fullname();
    if (key.starts_with("default.")) key = key.substr(8);
    std::string value;
    for (std::size_t i = 0; i < item.inputs.size(); ++i) value += (i ? "," : "") + item.inputs[i];
    try {
      set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ": " + e.what());
    }
  }
}

void Settings::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  load_text(ss.str(), path.string());
}

void Settings::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

const std::string& Settings::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown configuration key '" + key + "'");
  return it->second;
}

int Settings::get_int(const std::string& key) const {
  const std::string& v = get(key);
  int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": '" + v + "' is not an integer");
  return out;
}

std::uint64_t Settings::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": '" + v + "' is not an unsigned integer");
  return out;
}

double Settings::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw ConfigError(key + ": '" + v + "' is not a number");
    return d;
  } catch (const std::logic_error&) {
    throw ConfigError(key + ": '" + v + "' is not a number");
  }
}

bool Settings::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": '" + v + "' is not a boolean");
}

std::vector<double> Settings::get_doubles(const std::string& key) const {
  std::vector<double> out;
  if (get(key).empty()) return out;
  for (const std::string& part : split(get(key), ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::logic_error&) {
      throw ConfigError(key + ": '" + part + "' is not a number");
    }
  }
  return out;
}

std::string Settings::echo() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
  return os.str();
}

std::string Settings::hash() const {
  const std::string e = echo();
  return to_hex(sha256(std::span(reinterpret_cast<const std::uint8_t*>(e.data()), e.size()))).substr(0, 16);
}

// ---------------------------------------------------------------------------

std::vector<TaskId> parse_task_group(const std::string& text) {
  std::vector<TaskId> out;
  for (const std::string& name : split(text, '+')) {
    try {
      out.push_back(task_from_name(name));
    } catch (const DomainError& e) {
      throw ConfigError(e.what());
    }
  }
  if (out.empty()) throw ConfigError("empty task group");
  return out;
}

std::vector<std::vector<TaskId>> parse_task_groups(const std::string& text) {
  std::vector<std::vector<TaskId>> out;
  for (const std::string& g : split(text, ',')) {
    if (!g.empty()) out.push_back(parse_task_group(g));
  }
  return out;
}

WorldConfig world_config(const Settings& s) {
  WorldConfig w;
  w.size = s.get_int("world.size");
  w.master_seed = s.get_u64("seed");
  w.train_count = s.get_int("world.train");
  w.val_count = s.get_int("world.val");
  w.test_count = s.get_int("world.test");
  if (w.size < 8 || w.size % 8 != 0) throw ConfigError("world.size must be a positive multiple of 8");
  if (w.train_count <= 0 || w.val_count <= 0 || w.test_count <= 0) throw ConfigError("split sizes must be positive");
  return w;
}

WorkbenchConfig workbench_config(const Settings& s) {
  WorkbenchConfig c;
  c.world = world_config(s);
  c.net.base_channels = s.get_int("net.base_channels");
  c.net.feature_channels = s.get_int("net.feature_channels");
  c.net.seed = mix_seed(s.get_u64("seed"), 0x6e6574u);
  c.pretrain.steps = s.get_int("pretrain.steps");
  c.pretrain.batch = s.get_int("pretrain.batch");
  c.pretrain.lr = s.get_double("pretrain.lr");
  c.pretrain.seed = mix_seed(s.get_u64("seed"), 0x707274u);
  c.pretrain.class_floor = s.get_double("pretrain.class_floor");
  c.pretrain.seg_floor = s.get_double("pretrain.seg_floor");
  c.pretrain.regression_ratio_floor = s.get_double("pretrain.regression_ratio");
  if (c.net.base_channels <= 0 || c.net.feature_channels <= 0) throw ConfigError("net channels must be positive");
  if (c.pretrain.steps <= 0 || c.pretrain.batch <= 0 || !(c.pretrain.lr > 0.0)) {
    throw ConfigError("pretrain steps, batch and lr must be positive");
  }
  return c;
}

CodecConfig codec_config(const Settings& s) {
  CodecConfig c;
  c.port_channels = s.get_int("codec.port_channels");
  c.peripheral_depth = s.get_int("codec.peripheral_depth");
  c.latent_channels = s.get_int("codec.latent_channels");
  c.analysis_downs = s.get_int("codec.analysis_downs");
  const std::string prior = s.get("codec.prior");
  if (prior == "codebook") {
    c.prior = PriorKind::codebook;
  } else if (prior == "spatial") {
    c.prior = PriorKind::spatial;
  } else {
    throw ConfigError("codec.prior must be 'codebook' or 'spatial'");
  }
  c.codebook.m = s.get_int("codec.codebook_m");
  c.codebook.n = s.get_int("codec.codebook_n");
  c.codebook.tau = s.get_int("codec.codebook_tau");
  c.codebook.hc = c.codebook.wc = s.get_int("codec.codebook_extent");
  c.codebook.coeff_hidden = s.get_int("codec.coeff_hidden");
  c.codebook.predictor_width = s.get_int("codec.predictor_width");
  c.codebook.hyper_downs = s.get_int("codec.hyper_downs");
  c.spatial.side_channels = s.get_int("codec.spatial_side_channels");
  c.spatial.width = s.get_int("codec.spatial_width");
  c.precision = s.get_int("codec.precision");
  c.quant.t_min = s.get_int("codec.t_min");
  c.quant.t_max = s.get_int("codec.t_max");
  c.seed = mix_seed(s.get_u64("seed"), 0x636463u);
  try {
    c.quant.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

RDConfig rd_config(const Settings& s) {
  RDConfig r;
  r.lambda = s.get_double("train.lambda");
  r.weights = s.get_doubles("train.weights");
  r.lr = s.get_double("train.lr");
  r.steps = s.get_int("train.steps");
  r.batch = s.get_int("train.batch");
  r.eval_every = s.get_int("train.eval_every");
  r.control = s.get_bool("train.control");
  r.quant.t_min = s.get_int("codec.t_min");
  r.quant.t_max = s.get_int("codec.t_max");
  r.seed = mix_seed(s.get_u64("seed"), 0x747261u);
  if (!s.get("train.budget_bits").empty()) r.budget_bits = s.get_double("train.budget_bits");
  if (!(r.lambda > 0.0) && !r.control) throw ConfigError("train.lambda must be positive");
  if (r.steps <= 0 || r.batch <= 0 || r.eval_every <= 0 || !(r.lr > 0.0)) {
    throw ConfigError("train steps, batch, eval_every and lr must be positive");
  }
  if (!r.weights.empty()) {
    double total = 0.0;
    for (double w : r.weights) total += w;
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("train.weights must sum to 1");
  }
  return r;
}

ExperimentConfig experiment_config(const Settings& s) {
  ExperimentConfig e;
  e.codec = codec_config(s);
  e.rd = rd_config(s);
  e.rd.weights.clear();
  e.lambda_grid = s.get_doubles("plan.lambda_grid");
  e.bisect_steps = s.get_int("plan.bisect_steps");
  e.tol_up = s.get_double("plan.tol_up");
  e.tol_down = s.get_double("plan.tol_down");
  if (e.lambda_grid.empty()) throw ConfigError("plan.lambda_grid is empty");
  return e;
}

ExperimentPlan plan_config(const Settings& s) {
  ExperimentPlan p;
  try {
    p.kind = plan_kind_from_name(s.get("plan.kind"));
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  p.exp = experiment_config(s);
  p.groups = parse_task_groups(s.get("plan.groups"));
  // "Customized=scene,object|Trinity=scene+object"
  for (const std::string& scheme : split(s.get("plan.schemes"), '|')) {
    if (scheme.empty()) continue;
    const auto eq = scheme.find('=');
    if (eq == std::string::npos) throw ConfigError("plan.schemes entry '" + scheme + "' is not name=groups");
    p.schemes.push_back({trim(scheme.substr(0, eq)), parse_task_groups(scheme.substr(eq + 1))});
  }
  for (const std::string& pair : split(s.get("plan.pairs"), ',')) {
    if (pair.empty()) continue;
    const auto gt = pair.find('>');
    if (gt == std::string::npos) throw ConfigError("plan.pairs entry '" + pair + "' is not source>target");
    const auto src = parse_task_group(pair.substr(0, gt)), dst = parse_task_group(pair.substr(gt + 1));
    if (src.size() != 1 || dst.size() != 1) throw ConfigError("plan.pairs entries name single tasks");
    p.transfer_pairs.emplace_back(src[0], dst[0]);
  }
  const auto unseen = parse_task_group(s.get("plan.unseen"));
  if (unseen.size() != 1) throw ConfigError("plan.unseen names a single task");
  p.unseen = unseen[0];
  p.internal_group = parse_task_group(s.get("plan.internal"));
  p.external_group = parse_task_group(s.get("plan.external"));
  p.unseen_lambda = s.get_double("plan.unseen_lambda");
  p.external_steps = s.get_int("plan.external_steps");
  try {
    validate_plan(p);
  } catch (const DomainError& e) {
    throw ConfigError(std::string("plan: ") + e.what());
  }
  return p;
}

}  // namespace tck
