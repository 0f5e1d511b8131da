#include "tck/taskworld.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "tck/errors.hpp"
#include "tck/ops.hpp"
#include "tck/rng.hpp"

namespace tck {

namespace {

constexpr std::uint16_t kDatasetVersion = 1;
constexpr double kSlopeGain = 2.0;
constexpr double kCurvatureGain = 4.0;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Edge-clamped sample of an S×S field.
double at_clamped(const Tensor& f, int s, int y, int x) {
  y = std::clamp(y, 0, s - 1);
  x = std::clamp(x, 0, s - 1);
  return f[static_cast<std::size_t>(y) * s + x];
}

void add_bump(Tensor& f, int s, double cy, double cx, double amp, double width) {
  const double inv = 1.0 / (2.0 * width * width);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
      f[static_cast<std::size_t>(y) * s + x] += amp * std::exp(-d2 * inv);
    }
  }
}

// Unit normal of k·h by central differences, returned as (x, y, z) per pixel.
void normal_at(const Tensor& h, int s, int y, int x, double out[3]) {
  const double gx = 0.5 * (at_clamped(h, s, y, x + 1) - at_clamped(h, s, y, x - 1));
  const double gy = 0.5 * (at_clamped(h, s, y + 1, x) - at_clamped(h, s, y - 1, x));
  const double nx = -kSlopeGain * gx, ny = -kSlopeGain * gy;
  const double norm = std::sqrt(nx * nx + ny * ny + 1.0);
  out[0] = nx / norm;
  out[1] = ny / norm;
  out[2] = 1.0 / norm;
}

bool inside(const ObjectDesc& o, double y, double x) {
  if (o.cls % 2 == 0) return (y - o.cy) * (y - o.cy) + (x - o.cx) * (x - o.cx) <= o.size * o.size;
  return std::abs(y - o.cy) <= o.size && std::abs(x - o.cx) <= o.size;
}

void render(Scene& sc, Rng& rng) {
  const int s = sc.size;
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  const double two_pi = 2.0 * std::numbers::pi;

  // terrain: oriented sinusoid set by the scene class, plus roughness bumps
  const double theta = (sc.scene_class % 5) * std::numbers::pi / 5.0;
  const double cycles = sc.scene_class < 5 ? 1.5 : 3.0;
  const double phase = rng.uniform(0.0, two_pi);
  sc.terrain = Tensor({s, s});
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double u = (x * std::cos(theta) + y * std::sin(theta)) / s;
      sc.terrain[static_cast<std::size_t>(y) * s + x] = 0.6 * std::sin(two_pi * cycles * u + phase);
    }
  }
  const int terrain_bumps = static_cast<int>(std::floor(sc.roughness * 4.0));
  for (int i = 0; i < terrain_bumps; ++i) {
    const double cy = rng.uniform(0.0, s), cx = rng.uniform(0.0, s);
    const double amp = rng.uniform() < 0.5 ? -0.4 : 0.4;
    add_bump(sc.terrain, s, cy, cx, amp, s / 8.0);
  }

  // ripples: a handful of short plane waves, more of them on rough scenes
  sc.ripple = Tensor({s, s});
  const int ripples = 3 + static_cast<int>(std::floor(sc.roughness * 4.0));
  for (int i = 0; i < ripples; ++i) {
    const double dir = rng.uniform(0.0, std::numbers::pi);
    const double freq = rng.uniform(2.0, 4.0);
    const double ph = rng.uniform(0.0, two_pi);
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const double u = (x * std::cos(dir) + y * std::sin(dir)) / s;
        sc.ripple[static_cast<std::size_t>(y) * s + x] += 0.25 * std::sin(two_pi * freq * u + ph);
      }
    }
  }

  sc.segmentation.assign(plane, 0);
  for (const ObjectDesc& o : sc.objects) {
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        if (inside(o, y, x)) sc.segmentation[static_cast<std::size_t>(y) * s + x] = o.cls + 1;
      }
    }
  }
  sc.object_label = -1;
  double largest = -1.0;
  for (const ObjectDesc& o : sc.objects) {
    if (o.size > largest) {
      largest = o.size;
      sc.object_label = o.cls;
    }
  }

  sc.image = Tensor({kImageChannels, s, s});
  for (std::size_t p = 0; p < plane; ++p) {
    const int seg = sc.segmentation[p];
    const double albedo = seg == 0 ? 0.2 + 0.05 * rng.normal() : 0.4 + 0.15 * (seg - 1) + 0.02 * rng.normal();
    sc.image[p] = clamp01(albedo);
    sc.image[plane + p] = clamp01(0.5 + 0.3 * sc.terrain[p] + 0.01 * rng.normal());
    sc.image[2 * plane + p] = clamp01(0.5 + 0.3 * sc.ripple[p] + 0.01 * rng.normal());
  }

  Tensor combined({s, s});
  for (std::size_t p = 0; p < plane; ++p) combined[p] = sc.terrain[p] + sc.ripple[p];
  const double lx = 0.5, ly = 0.3, lz = 1.0;
  const double ln = std::sqrt(lx * lx + ly * ly + lz * lz);
  sc.surface = Tensor({2, s, s});
  sc.shading = Tensor({1, s, s});
  sc.curvature = Tensor({1, s, s});
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * s + x;
      double n[3];
      normal_at(sc.terrain, s, y, x, n);
      sc.surface[p] = n[0];
      sc.surface[plane + p] = n[1];
      normal_at(combined, s, y, x, n);
      sc.shading[p] = std::max(0.0, (n[0] * lx + n[1] * ly + n[2] * lz) / ln);
      const double lap = at_clamped(sc.ripple, s, y - 1, x) + at_clamped(sc.ripple, s, y + 1, x) +
                         at_clamped(sc.ripple, s, y, x - 1) + at_clamped(sc.ripple, s, y, x + 1) -
                         4.0 * sc.ripple[p];
      sc.curvature[p] = kCurvatureGain * lap;
    }
  }
}

std::vector<ObjectDesc> place_objects(Rng& rng, int s, int scene_class, int count) {
  std::vector<ObjectDesc> objs;
  for (int i = 0; i < count; ++i) {
    ObjectDesc o;
    // the scene class biases which object appears
    o.cls = rng.uniform() < 0.5 ? scene_class % kObjectClasses : rng.uniform_int(kObjectClasses);
    o.size = rng.uniform(s / 8.0, s / 4.0);
    bool placed = false;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      o.cy = std::round(rng.uniform(o.size, s - 1 - o.size));
      o.cx = std::round(rng.uniform(o.size, s - 1 - o.size));
      placed = std::all_of(objs.begin(), objs.end(), [&](const ObjectDesc& q) {
        // bounding squares must stay apart so every object keeps its centre
        return std::max(std::abs(o.cy - q.cy), std::abs(o.cx - q.cx)) > o.size + q.size + 1.0;
      });
    }
    if (placed) objs.push_back(o);
  }
  return objs;
}

void put_f64s(ByteWriter& w, const Tensor& t) {
  for (double v : t.values()) w.f64(v);
}

Tensor get_f64s(ByteReader& r, Shape shape) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = r.f64();
  return t;
}

Bytes dataset_payload(const Dataset& d) {
  ByteWriter w;
  put_f64s(w, d.images);
  for (int v : d.scene) w.i32(v);
  for (int v : d.object) w.i32(v);
  for (int v : d.segmentation) w.u8(static_cast<std::uint8_t>(v));
  put_f64s(w, d.surface);
  put_f64s(w, d.shading);
  put_f64s(w, d.curvature);
  return w.take();
}

}  // namespace

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::uint64_t scene_seed(std::uint64_t master_seed, Split split, int index) {
  return mix_seed(mix_seed(master_seed, 0x5350u + static_cast<std::uint64_t>(split)), static_cast<std::uint64_t>(index));
}

Scene generate_scene(std::uint64_t seed, int size, bool allow_empty) {
  if (size < 8 || size % 4 != 0) throw DomainError("generate_scene: size must be a multiple of 4, at least 8");
  Rng rng(seed);
  Scene sc;
  sc.seed = seed;
  sc.size = size;
  sc.scene_class = rng.uniform_int(kSceneClasses);
  sc.roughness = rng.uniform();
  const int count = allow_empty ? rng.uniform_int(4) : 1 + rng.uniform_int(3);
  sc.objects = place_objects(rng, size, sc.scene_class, count);
  render(sc, rng);
  return sc;
}

Scene generate_scene_without_objects(std::uint64_t seed, int size) {
  Rng rng(seed);
  Scene sc;
  sc.seed = seed;
  sc.size = size;
  sc.scene_class = rng.uniform_int(kSceneClasses);
  sc.roughness = rng.uniform();
  render(sc, rng);
  return sc;
}

int split_count(const WorldConfig& cfg, Split split) {
  switch (split) {
    case Split::train: return cfg.train_count;
    case Split::val: return cfg.val_count;
    case Split::test: return cfg.test_count;
  }
  return 0;
}

Dataset generate_dataset(const WorldConfig& cfg, Split split) {
  const int n = split_count(cfg, split);
  if (n <= 0) throw DomainError(std::string("generate_dataset: empty split ") + split_name(split));
  const int s = cfg.size;
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  Dataset d;
  d.split = split;
  d.master_seed = cfg.master_seed;
  d.count = n;
  d.size = s;
  d.images = Tensor({n, kImageChannels, s, s});
  d.surface = Tensor({n, 2, s, s});
  d.shading = Tensor({n, 1, s, s});
  d.curvature = Tensor({n, 1, s, s});
  d.scene.resize(n);
  d.object.resize(n);
  d.segmentation.resize(static_cast<std::size_t>(n) * plane);
  for (int i = 0; i < n; ++i) {
    const Scene sc = generate_scene(scene_seed(cfg.master_seed, split, i), s, cfg.allow_empty);
    const auto copy_into = [i](Tensor& dst, const Tensor& src) {
      std::copy(src.values().begin(), src.values().end(), dst.data() + static_cast<std::size_t>(i) * src.numel());
    };
    copy_into(d.images, sc.image);
    copy_into(d.surface, sc.surface);
    copy_into(d.shading, sc.shading);
    copy_into(d.curvature, sc.curvature);
    d.scene[i] = sc.scene_class;
    d.object[i] = sc.object_label;
    std::copy(sc.segmentation.begin(), sc.segmentation.end(), d.segmentation.begin() + i * plane);
  }
  return d;
}

Digest Dataset::digest() const { return sha256(dataset_payload(*this)); }

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  const Bytes payload = dataset_payload(d);
  ByteWriter w;
  w.text("TCKD");
  w.u16(kDatasetVersion);
  w.u64(d.master_seed);
  w.u8(static_cast<std::uint8_t>(d.split));
  w.u32(static_cast<std::uint32_t>(d.count));
  w.u16(static_cast<std::uint16_t>(d.size));
  const Digest dg = sha256(payload);
  w.raw(dg);
  w.raw(payload);
  write_file_atomic(path, w.bytes());
}

Dataset load_dataset(const std::filesystem::path& path) {
  const Bytes bytes = read_file(path);
  ByteReader r(bytes);
  if (r.text(4) != "TCKD") throw CorruptionError("dataset cache: bad magic in " + path.string());
  const std::uint16_t version = r.u16();
  if (version != kDatasetVersion) throw VersionError("dataset cache: unsupported version " + std::to_string(version));
  Dataset d;
  d.master_seed = r.u64();
  const std::uint8_t split = r.u8();
  if (split > 2) throw CorruptionError("dataset cache: bad split tag");
  d.split = static_cast<Split>(split);
  d.count = static_cast<int>(r.u32());
  d.size = r.u16();
  Digest expected;
  const auto dg = r.raw(32);
  std::copy(dg.begin(), dg.end(), expected.begin());
  const auto payload = bytes.size() - r.position();
  if (sha256(std::span(bytes).subspan(r.position())) != expected) {
    throw CorruptionError("dataset cache: digest mismatch in " + path.string());
  }
  const int n = d.count, s = d.size;
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  const std::size_t want = static_cast<std::size_t>(n) * plane * (8 * (kImageChannels + 4) + 1) + 8u * n;
  if (payload != want) throw CorruptionError("dataset cache: payload size mismatch");
  d.images = get_f64s(r, {n, kImageChannels, s, s});
  d.scene.resize(n);
  d.object.resize(n);
  for (int& v : d.scene) v = r.i32();
  for (int& v : d.object) v = r.i32();
  d.segmentation.resize(static_cast<std::size_t>(n) * plane);
  for (int& v : d.segmentation) v = r.u8();
  d.surface = get_f64s(r, {n, 2, s, s});
  d.shading = get_f64s(r, {n, 1, s, s});
  d.curvature = get_f64s(r, {n, 1, s, s});
  return d;
}

std::filesystem::path dataset_path(const std::filesystem::path& dir, Split split) {
  return dir / (std::string(split_name(split)) + ".tckd");
}

Dataset ensure_dataset(const WorldConfig& cfg, Split split, const std::filesystem::path& dir, CacheStatus* status,
                       std::string* warning) {
  const auto path = dataset_path(dir, split);
  CacheStatus st = CacheStatus::created;
  if (std::filesystem::exists(path)) {
    st = CacheStatus::regenerated;
    try {
      Dataset d = load_dataset(path);
      if (d.master_seed == cfg.master_seed && d.split == split && d.count == split_count(cfg, split) &&
          d.size == cfg.size) {
        if (status) *status = CacheStatus::valid;
        return d;
      }
    } catch (const CorruptionError& e) {
      if (warning) *warning = std::string("corrupt cache, regenerating: ") + e.what();
    } catch (const VersionError& e) {
      if (warning) *warning = std::string("stale cache, regenerating: ") + e.what();
    }
  }
  std::filesystem::create_directories(dir);
  Dataset d = generate_dataset(cfg, split);
  save_dataset(d, path);
  if (status) *status = st;
  return d;
}

// ---------------------------------------------------------------------------

const std::vector<TaskSpec>& all_tasks() {
  static const std::vector<TaskSpec> tasks = {
      {TaskId::scene, "scene", TaskKind::image_class, kSceneClasses, Metric::top1, true},
      {TaskId::object, "object", TaskKind::image_class, kObjectClasses, Metric::top1, true},
      {TaskId::segment, "segment", TaskKind::pixel_class, kSegClasses, Metric::miou, true},
      {TaskId::surface, "surface", TaskKind::pixel_regression, 2, Metric::l1, false},
      {TaskId::shading, "shading", TaskKind::pixel_regression, 1, Metric::l1, false},
      {TaskId::curvature, "curvature", TaskKind::pixel_regression, 1, Metric::l1, false},
  };
  return tasks;
}

const TaskSpec& task_spec(TaskId id) {
  const int i = static_cast<int>(id);
  if (i < 0 || i >= kTaskCount) throw DomainError("task_spec: unknown task id " + std::to_string(i));
  return all_tasks()[static_cast<std::size_t>(i)];
}

TaskId task_from_name(const std::string& name) {
  for (const TaskSpec& t : all_tasks()) {
    if (t.name == name) return t.id;
  }
  throw DomainError("unknown task '" + name + "'");
}

const char* metric_name(Metric m) {
  switch (m) {
    case Metric::top1: return "top1";
    case Metric::pixel_acc: return "pixel_acc";
    case Metric::non_bg_acc: return "non_bg_acc";
    case Metric::miou: return "miou";
    case Metric::l1: return "l1";
  }
  return "?";
}

namespace {
void require_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": " + std::to_string(a) + " predictions vs " + std::to_string(b) + " labels");
}
}  // namespace

double top1(const std::vector<int>& pred, const std::vector<int>& label) {
  require_same(pred.size(), label.size(), "top1");
  std::size_t hit = 0, n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (label[i] < 0) continue;
    ++n;
    hit += pred[i] == label[i];
  }
  return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
}

double pixel_accuracy(const std::vector<int>& pred, const std::vector<int>& label) {
  require_same(pred.size(), label.size(), "pixel_accuracy");
  if (label.empty()) throw ShapeError("pixel_accuracy: no pixels");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == label[i];
  return static_cast<double>(hit) / static_cast<double>(label.size());
}

std::optional<double> non_background_accuracy(const std::vector<int>& pred, const std::vector<int>& label) {
  require_same(pred.size(), label.size(), "non_background_accuracy");
  std::size_t hit = 0, n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (label[i] == 0) continue;
    ++n;
    hit += pred[i] == label[i];
  }
  if (n == 0) return std::nullopt;
  return static_cast<double>(hit) / static_cast<double>(n);
}

double mean_iou(const std::vector<int>& pred, const std::vector<int>& label, int classes) {
  require_same(pred.size(), label.size(), "mean_iou");
  if (classes <= 0) throw DomainError("mean_iou: no classes");
  std::vector<std::size_t> inter(classes, 0), uni(classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i], l = label[i];
    if (p < 0 || p >= classes || l < 0 || l >= classes) throw DomainError("mean_iou: class out of range");
    if (p == l) {
      ++inter[p];
      ++uni[p];
    } else {
      ++uni[p];
      ++uni[l];
    }
  }
  double acc = 0.0;
  for (int c = 0; c < classes; ++c) {
    acc += uni[c] == 0 ? 1.0 : static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
  }
  return acc / classes;
}

double mean_l1(const Tensor& pred, const Tensor& label) {
  if (pred.shape() != label.shape()) {
    throw ShapeError("mean_l1: " + shape_str(pred.shape()) + " vs " + shape_str(label.shape()));
  }
  if (label.numel() == 0) throw ShapeError("mean_l1: empty");
  double acc = 0.0;
  for (std::size_t i = 0; i < label.numel(); ++i) acc += std::abs(pred[i] - label[i]);
  return acc / static_cast<double>(label.numel());
}

// ---------------------------------------------------------------------------

TaskBatch task_batch(const Dataset& d, TaskId task, const std::vector<int>& indices) {
  TaskBatch b;
  b.images = gather_batch(d.images, indices);
  const std::size_t plane = static_cast<std::size_t>(d.size) * d.size;
  switch (task) {
    case TaskId::scene:
      for (int i : indices) b.class_labels.push_back(d.scene[static_cast<std::size_t>(i)]);
      break;
    case TaskId::object:
      for (int i : indices) b.class_labels.push_back(d.object[static_cast<std::size_t>(i)]);
      break;
    case TaskId::segment:
      for (int i : indices) {
        const auto first = d.segmentation.begin() + static_cast<std::ptrdiff_t>(i * plane);
        b.class_labels.insert(b.class_labels.end(), first, first + static_cast<std::ptrdiff_t>(plane));
      }
      break;
    case TaskId::surface: b.regression = gather_batch(d.surface, indices); break;
    case TaskId::shading: b.regression = gather_batch(d.shading, indices); break;
    case TaskId::curvature: b.regression = gather_batch(d.curvature, indices); break;
  }
  return b;
}

TaskNet::TaskNet(TaskId task, int image_size, const TaskNetConfig& cfg) : task_(task), image_size_(image_size), cfg_(cfg) {
  if (image_size % 8 != 0) throw DomainError("TaskNet: image size must be a multiple of 8");
  const int b = cfg.base_channels, f = cfg.feature_channels;
  const std::uint64_t seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(task));
  const std::string tag = spec().name;
  encoder_ = Network(tag + ".enc",
                     {{LayerKind::conv3x3, kImageChannels, b},
                      {LayerKind::relu},
                      {LayerKind::conv3x3_s2, b, b},
                      {LayerKind::relu},
                      {LayerKind::conv3x3_s2, b, f},
                      {LayerKind::relu}},
                     mix_seed(seed, 1));
  const int out = spec().out_channels;
  if (spec().kind == TaskKind::image_class) {
    dec_down_ = Network(tag + ".dec",
                        {{LayerKind::conv3x3_s2, f, 2 * b},
                         {LayerKind::relu},
                         {LayerKind::global_avg_pool},
                         {LayerKind::linear, 2 * b, out}},
                        mix_seed(seed, 2));
  } else {
    dec_down_ = Network(tag + ".down", {{LayerKind::conv3x3_s2, f, 2 * b}, {LayerKind::relu}}, mix_seed(seed, 2));
    dec_up_ = Network(tag + ".up", {{LayerKind::deconv2, 2 * b, f}, {LayerKind::relu}}, mix_seed(seed, 3));
    dec_head_ = Network(tag + ".head",
                        {{LayerKind::deconv2, f, b},
                         {LayerKind::relu},
                         {LayerKind::deconv2, b, b},
                         {LayerKind::relu},
                         {LayerKind::conv1x1, b, out}},
                        mix_seed(seed, 4));
  }
}

Shape TaskNet::feature_shape() const { return {cfg_.feature_channels, image_size_ / 4, image_size_ / 4}; }

// inputs are centred to [-1, 1] before the first convolution
Var TaskNet::encode(Graph& g, Var images) { return encoder_.apply(g, ops::add_scalar(ops::scale(images, 2.0), -1.0)); }

Var TaskNet::decode(Graph& g, Var features) {
  if (spec().kind == TaskKind::image_class) return dec_down_.apply(g, features);
  Var h = dec_up_.apply(g, dec_down_.apply(g, features));
  return dec_head_.apply(g, ops::add(h, features));
}

Var TaskNet::loss(Graph& g, Var outputs, const TaskBatch& batch) {
  (void)g;
  if (spec().kind == TaskKind::pixel_regression) return ops::l1_loss(outputs, batch.regression);
  return ops::cross_entropy(outputs, batch.class_labels);
}

Tensor TaskNet::encode(const Tensor& images) {
  Graph g(false);
  return encode(g, g.constant(images)).value();
}

Tensor TaskNet::decode(const Tensor& features) {
  Graph g(false);
  return decode(g, g.constant(features)).value();
}

std::vector<Parameter*> TaskNet::decoder_parameters() {
  std::vector<Parameter*> out;
  for (Network* n : {&dec_down_, &dec_up_, &dec_head_}) {
    for (Parameter* p : parameter_ptrs(*n)) out.push_back(p);
  }
  return out;
}

std::vector<Parameter*> TaskNet::parameters() {
  std::vector<Parameter*> out = parameter_ptrs(encoder_);
  for (Parameter* p : decoder_parameters()) out.push_back(p);
  return out;
}

void TaskNet::freeze() {
  for (Network* n : {&encoder_, &dec_down_, &dec_up_, &dec_head_}) n->freeze();
  frozen_ = true;
}

NamedArrays TaskNet::arrays() {
  NamedArrays out;
  out.emplace_back("meta.tasknet", Tensor({5}, {static_cast<double>(task_), static_cast<double>(image_size_),
                                                static_cast<double>(cfg_.base_channels),
                                                static_cast<double>(cfg_.feature_channels),
                                                static_cast<double>(cfg_.seed)}));
  append_arrays(out, parameters());
  return out;
}

Digest TaskNet::digest() { return sha256(serialize_arrays("TCKT", arrays())); }

void TaskNet::save(const std::filesystem::path& path) { write_file_atomic(path, serialize_arrays("TCKT", arrays())); }

TaskNet TaskNet::load(const std::filesystem::path& path) {
  const NamedArrays arrays = read_arrays(path, "TCKT");
  const Tensor& meta = find_array(arrays, "meta.tasknet");
  if (meta.numel() != 5) throw CorruptionError("task net: bad meta record");
  const int task = static_cast<int>(meta[0]);
  if (task < 0 || task >= kTaskCount) throw CorruptionError("task net: bad task id");
  TaskNetConfig cfg;
  cfg.base_channels = static_cast<int>(meta[2]);
  cfg.feature_channels = static_cast<int>(meta[3]);
  cfg.seed = static_cast<std::uint64_t>(meta[4]);
  TaskNet net(static_cast<TaskId>(task), static_cast<int>(meta[1]), cfg);
  assign_arrays(net.parameters(), arrays);
  net.freeze();
  return net;
}

// ---------------------------------------------------------------------------

void Evaluator::add(const Tensor& outputs, const TaskBatch& batch, double batch_loss) {
  const TaskSpec& sp = task_spec(task_);
  const int n = outputs.dim(0);
  loss_sum_ += batch_loss * n;
  loss_items_ += static_cast<std::size_t>(n);
  if (sp.kind == TaskKind::pixel_regression) {
    if (outputs.shape() != batch.regression.shape()) throw ShapeError("Evaluator: extent mismatch");
    for (std::size_t i = 0; i < outputs.numel(); ++i) l1_sum_ += std::abs(outputs[i] - batch.regression[i]);
    l1_count_ += outputs.numel();
    return;
  }
  const int k = outputs.dim(1);
  const std::size_t plane = outputs.rank() == 4 ? static_cast<std::size_t>(outputs.dim(2)) * outputs.dim(3) : 1;
  if (batch.class_labels.size() != static_cast<std::size_t>(n) * plane) throw ShapeError("Evaluator: extent mismatch");
  for (int b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t base = static_cast<std::size_t>(b) * k * plane + p;
      int best = 0;
      for (int j = 1; j < k; ++j) {
        if (outputs[base + j * plane] > outputs[base + best * plane]) best = j;
      }
      pred_.push_back(best);
      label_.push_back(batch.class_labels[static_cast<std::size_t>(b) * plane + p]);
    }
  }
}

EvalResult Evaluator::result() const {
  EvalResult r;
  r.loss = loss_items_ ? loss_sum_ / static_cast<double>(loss_items_) : 0.0;
  const TaskSpec& sp = task_spec(task_);
  if (sp.kind == TaskKind::pixel_regression) {
    r.metric = l1_count_ ? l1_sum_ / static_cast<double>(l1_count_) : 0.0;
  } else if (sp.kind == TaskKind::image_class) {
    r.metric = top1(pred_, label_);
  } else {
    r.metric = mean_iou(pred_, label_, sp.out_channels);
    r.pixel_acc = pixel_accuracy(pred_, label_);
    r.non_bg_acc = non_background_accuracy(pred_, label_);
  }
  return r;
}

EvalResult evaluate_net(TaskNet& net, const Dataset& d, int batch) {
  Evaluator ev(net.task());
  for (int start = 0; start < d.count; start += batch) {
    std::vector<int> idx;
    for (int i = start; i < std::min(d.count, start + batch); ++i) idx.push_back(i);
    const TaskBatch tb = task_batch(d, net.task(), idx);
    Graph g(false);
    Var out = net.decode(g, net.encode(g, g.constant(tb.images)));
    const double l = net.loss(g, out, tb).value()[0];
    ev.add(out.value(), tb, l);
  }
  return ev.result();
}

double constant_baseline(TaskId task, const Dataset& train, const Dataset& eval) {
  const TaskSpec& sp = task_spec(task);
  std::vector<int> all(static_cast<std::size_t>(eval.count));
  for (int i = 0; i < eval.count; ++i) all[static_cast<std::size_t>(i)] = i;
  if (sp.kind == TaskKind::pixel_regression) {
    std::vector<int> tidx(static_cast<std::size_t>(train.count));
    for (int i = 0; i < train.count; ++i) tidx[static_cast<std::size_t>(i)] = i;
    const Tensor t = task_batch(train, task, tidx).regression;
    const Tensor e = task_batch(eval, task, all).regression;
    const int c = t.dim(1);
    const std::size_t plane = static_cast<std::size_t>(t.dim(2)) * t.dim(3);
    std::vector<double> mu(static_cast<std::size_t>(c), 0.0);
    for (int n = 0; n < t.dim(0); ++n) {
      for (int ch = 0; ch < c; ++ch) {
        for (std::size_t p = 0; p < plane; ++p) mu[ch] += t[(static_cast<std::size_t>(n) * c + ch) * plane + p];
      }
    }
    for (double& m : mu) m /= static_cast<double>(t.dim(0) * plane);
    Tensor pred(e.shape());
    for (int n = 0; n < e.dim(0); ++n) {
      for (int ch = 0; ch < c; ++ch) {
        for (std::size_t p = 0; p < plane; ++p) pred[(static_cast<std::size_t>(n) * c + ch) * plane + p] = mu[ch];
      }
    }
    return mean_l1(pred, e);
  }
  std::vector<int> tidx(static_cast<std::size_t>(train.count));
  for (int i = 0; i < train.count; ++i) tidx[static_cast<std::size_t>(i)] = i;
  const std::vector<int> tl = task_batch(train, task, tidx).class_labels;
  std::vector<std::size_t> counts(static_cast<std::size_t>(sp.out_channels), 0);
  for (int l : tl) {
    if (l >= 0) ++counts[static_cast<std::size_t>(l)];
  }
  const int majority = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  const std::vector<int> el = task_batch(eval, task, all).class_labels;
  const std::vector<int> pred(el.size(), majority);
  if (sp.kind == TaskKind::image_class) return top1(pred, el);
  return mean_iou(pred, el, sp.out_channels);
}

TaskNet pretrain(TaskId task, const Dataset& train, const Dataset& val, const TaskNetConfig& net_cfg,
                 const PretrainConfig& cfg, PretrainReport* report) {
  TaskNet net(task, train.size, net_cfg);
  Adam opt(net.parameters(), AdamConfig{cfg.lr});
  Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(task)));
  std::vector<int> order(static_cast<std::size_t>(train.count));
  for (int i = 0; i < train.count; ++i) order[static_cast<std::size_t>(i)] = i;
  std::size_t cursor = order.size();
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<int> idx;
    while (static_cast<int>(idx.size()) < cfg.batch) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.next() % i]);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    // cosine decay keeps the late steps from oscillating
    opt.set_lr(cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * step / cfg.steps)));
    const TaskBatch tb = task_batch(train, task, idx);
    opt.zero_grad();
    Graph g;
    Var out = net.decode(g, net.encode(g, g.constant(tb.images)));
    Var l = net.loss(g, out, tb);
    if (!std::isfinite(l.value()[0])) throw DomainError("pretrain: non-finite loss at step " + std::to_string(step));
    g.backward(l);
    opt.step();
  }
  net.freeze();
  if (report) {
    const TaskSpec& sp = task_spec(task);
    report->val = evaluate_net(net, val);
    report->baseline = constant_baseline(task, train, val);
    if (sp.kind == TaskKind::image_class) {
      report->floor = cfg.class_floor;
      report->floor_met = report->val.metric >= report->floor;
    } else if (sp.kind == TaskKind::pixel_class) {
      report->floor = cfg.seg_floor;
      report->floor_met = report->val.metric >= report->floor;
    } else {
      report->floor = cfg.regression_ratio_floor * report->baseline;
      report->floor_met = report->val.metric <= report->floor;
    }
  }
  return net;
}

}  // namespace tck
