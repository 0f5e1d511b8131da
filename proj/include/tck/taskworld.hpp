#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tck/graph.hpp"
#include "tck/network.hpp"
#include "tck/optim.hpp"
#include "tck/serialize.hpp"

namespace tck {

// ---------------------------------------------------------------------------
// Scenes

inline constexpr int kSceneClasses = 10;
inline constexpr int kObjectClasses = 5;
inline constexpr int kSegClasses = kObjectClasses + 1;  // 0 = background
inline constexpr int kImageChannels = 3;

enum class Split { train = 0, val = 1, test = 2 };
const char* split_name(Split s);

struct ObjectDesc {
  int cls = 0;
  double cy = 0.0, cx = 0.0;
  double size = 0.0;  // radius or half side
};

struct WorldConfig {
  int size = 32;  // image extent (square)
  std::uint64_t master_seed = 2024;
  int train_count = 4096;
  int val_count = 256;
  int test_count = 256;
  // scene generation can be forced to carry no objects (degenerate checks)
  bool allow_empty = false;
};

// One rendered scene: image channels are albedo, terrain height and ripple
// height; every label is computed from the latent description.
struct Scene {
  std::uint64_t seed = 0;
  int size = 0;
  int scene_class = 0;
  double roughness = 0.0;
  std::vector<ObjectDesc> objects;
  Tensor image;        // (3, S, S)
  Tensor terrain;      // (S, S), drives surface field and shading
  Tensor ripple;       // (S, S), drives curvature and shading
  std::vector<int> segmentation;  // S*S, 0 = background, class+1 inside objects
  int object_label = -1;          // class of the largest object, -1 when empty
  Tensor surface;      // (2, S, S)
  Tensor shading;      // (1, S, S)
  Tensor curvature;    // (1, S, S)
};

std::uint64_t scene_seed(std::uint64_t master_seed, Split split, int index);
Scene generate_scene(std::uint64_t seed, int size, bool allow_empty = false);
// Empty-object scene used by degenerate-case checks.
Scene generate_scene_without_objects(std::uint64_t seed, int size);

// Batched corpus of one split.
struct Dataset {
  Split split = Split::train;
  std::uint64_t master_seed = 0;
  int count = 0;
  int size = 0;
  Tensor images;  // (N, 3, S, S)
  std::vector<int> scene;
  std::vector<int> object;
  std::vector<int> segmentation;  // N*S*S
  Tensor surface;    // (N, 2, S, S)
  Tensor shading;    // (N, 1, S, S)
  Tensor curvature;  // (N, 1, S, S)

  Digest digest() const;
};

Dataset generate_dataset(const WorldConfig& cfg, Split split);
int split_count(const WorldConfig& cfg, Split split);

// Cache file: "TCKD", u16 version, u64 master seed, u8 split, u32 count,
// u16 size, 32-byte payload digest, then little-endian payloads.
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

enum class CacheStatus { valid, created, regenerated };
// Loads the cached split when it matches `cfg`, otherwise (re)generates it.
Dataset ensure_dataset(const WorldConfig& cfg, Split split, const std::filesystem::path& dir, CacheStatus* status,
                       std::string* warning = nullptr);
std::filesystem::path dataset_path(const std::filesystem::path& dir, Split split);

// ---------------------------------------------------------------------------
// Tasks and metrics

enum class TaskId { scene = 0, object = 1, segment = 2, surface = 3, shading = 4, curvature = 5 };
inline constexpr int kTaskCount = 6;
enum class TaskKind { image_class, pixel_class, pixel_regression };
enum class Metric { top1, pixel_acc, non_bg_acc, miou, l1 };

struct TaskSpec {
  TaskId id;
  std::string name;
  TaskKind kind;
  int out_channels;  // classes or regression channels
  Metric metric;     // headline metric
  bool higher_is_better;
};

const TaskSpec& task_spec(TaskId id);
const std::vector<TaskSpec>& all_tasks();
TaskId task_from_name(const std::string& name);
const char* metric_name(Metric m);

double top1(const std::vector<int>& pred, const std::vector<int>& label);
double pixel_accuracy(const std::vector<int>& pred, const std::vector<int>& label);
// Accuracy over pixels whose label is not background; empty when there are none.
std::optional<double> non_background_accuracy(const std::vector<int>& pred, const std::vector<int>& label);
// Mean over all classes of |P n L| / |P u L|; a class with an empty union
// counts as 1, a class that is predicted but absent from the labels as 0.
double mean_iou(const std::vector<int>& pred, const std::vector<int>& label, int classes);
double mean_l1(const Tensor& pred, const Tensor& label);

// ---------------------------------------------------------------------------
// Hourglass task networks

struct TaskNetConfig {
  int base_channels = 16;
  int feature_channels = 16;  // C_f at the tap
  std::uint64_t seed = 1;
};

struct TaskBatch {
  Tensor images;
  std::vector<int> class_labels;  // image-level or per-pixel
  Tensor regression;
};

TaskBatch task_batch(const Dataset& d, TaskId task, const std::vector<int>& indices);

// Encoder half E (image -> tap feature at 1/4 resolution) and decoder half A.
// Dense decoders go one level deeper, then add the tap back on the way up.
class TaskNet {
 public:
  TaskNet() = default;
  TaskNet(TaskId task, int image_size, const TaskNetConfig& cfg);

  TaskId task() const { return task_; }
  const TaskSpec& spec() const { return task_spec(task_); }
  const TaskNetConfig& config() const { return cfg_; }
  int image_size() const { return image_size_; }
  // (C_f, S/4, S/4)
  Shape feature_shape() const;

  Var encode(Graph& g, Var images);
  Var decode(Graph& g, Var features);
  // Training surrogate: mean cross-entropy or mean L1.
  Var loss(Graph& g, Var outputs, const TaskBatch& batch);

  Tensor encode(const Tensor& images);
  Tensor decode(const Tensor& features);

  std::vector<Parameter*> parameters();
  std::vector<Parameter*> decoder_parameters();
  void freeze();
  bool frozen() const { return frozen_; }

  NamedArrays arrays();
  void save(const std::filesystem::path& path);
  static TaskNet load(const std::filesystem::path& path);
  Digest digest();

 private:
  TaskId task_ = TaskId::scene;
  int image_size_ = 0;
  TaskNetConfig cfg_;
  Network encoder_;
  Network dec_down_;  // class head or dense bottleneck
  Network dec_up_;    // dense: bottleneck -> tap resolution
  Network dec_head_;  // dense: tap resolution -> image resolution
  bool frozen_ = false;
};

// Metric of decoder outputs against a dataset slice.
struct EvalResult {
  double metric = 0.0;  // headline metric
  double loss = 0.0;    // training surrogate
  double pixel_acc = 0.0;
  std::optional<double> non_bg_acc;
};

// Accumulates predictions batch by batch.
class Evaluator {
 public:
  explicit Evaluator(TaskId task) : task_(task) {}
  void add(const Tensor& outputs, const TaskBatch& batch, double batch_loss);
  EvalResult result() const;

 private:
  TaskId task_;
  std::vector<int> pred_, label_;
  double l1_sum_ = 0.0;
  std::size_t l1_count_ = 0;
  double loss_sum_ = 0.0;
  std::size_t loss_items_ = 0;
};

struct PretrainConfig {
  int steps = 2000;
  int batch = 16;
  double lr = 3e-3;
  std::uint64_t seed = 7;
  // Floors: top1 / mIoU at least this, or L1 at most this fraction of the
  // constant-predictor L1.
  double class_floor = 0.8;
  double seg_floor = 0.5;
  double regression_ratio_floor = 0.5;
};

struct PretrainReport {
  EvalResult val;
  double baseline = 0.0;  // constant-predictor metric on val
  double floor = 0.0;
  bool floor_met = false;
};

TaskNet pretrain(TaskId task, const Dataset& train, const Dataset& val, const TaskNetConfig& net_cfg,
                 const PretrainConfig& cfg, PretrainReport* report = nullptr);

// Evaluates the full net (encoder + decoder) on a split.
EvalResult evaluate_net(TaskNet& net, const Dataset& d, int batch = 32);
// Constant predictor calibration: majority class / per-pixel mean of train.
double constant_baseline(TaskId task, const Dataset& train, const Dataset& eval);

}  // namespace tck
