#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tck/codec.hpp"
#include "tck/graph.hpp"
#include "tck/optim.hpp"
#include "tck/taskworld.hpp"

namespace tck {

// ---------------------------------------------------------------------------
// Loss

struct RDConfig {
  double lambda = 1.0;
  std::vector<double> weights;  // one per port, summing to 1; empty = uniform
  double lr = 1e-3;
  int steps = 20000;
  int batch = 16;
  int eval_every = 250;
  QuantSpec quant;
  std::uint64_t seed = 1;
  std::optional<double> budget_bits;  // reporting only
  // No rate term and no quantisation: the unconstrained reference.
  bool control = false;

  // Weights for `ports` ports (uniform when unset); throws DomainError when
  // the weights do not sum to 1 or lambda is negative.
  std::vector<double> resolved_weights(std::size_t ports) const;
};

// rate + lambda * sum_i w_i loss_i. `rate` is in whatever unit the caller
// normalises to; training passes bits per source pixel.
double rd_loss(double rate, std::span<const double> task_losses, const RDConfig& cfg);
Var rd_loss(Var rate, const std::vector<Var>& task_losses, const RDConfig& cfg);

// ---------------------------------------------------------------------------
// Frozen world: cached splits, pretrained nets and their tap features.

struct WorkbenchConfig {
  WorldConfig world;
  TaskNetConfig net;
  PretrainConfig pretrain;
};

class Workbench {
 public:
  // Datasets under <dir>/data, nets under <dir>/nets. Missing artefacts throw
  // PrerequisiteError naming the command that produces them.
  static Workbench open(const std::filesystem::path& dir, const WorldConfig& world);
  // Builds whatever is missing (dataset and every net), then opens.
  static Workbench prepare(const std::filesystem::path& dir, const WorkbenchConfig& cfg, std::ostream* log = nullptr);

  const Dataset& split(Split s) const;
  TaskNet& net(TaskId t);
  // Tap features of the frozen encoder, (N, C_f, S/4, S/4).
  const Tensor& features(TaskId t, Split s);
  PortSpec port_spec(TaskId t);
  int image_size() const { return train_.size; }
  const std::filesystem::path& dir() const { return dir_; }

  static std::filesystem::path net_path(const std::filesystem::path& dir, TaskId t);

 private:
  std::filesystem::path dir_;
  Dataset train_, val_, test_;
  std::vector<std::optional<TaskNet>> nets_;
  std::vector<std::vector<Tensor>> feats_;  // [task][split]
};

// One codec port: the source feature compressed, and the task whose frozen
// decoder consumes the reconstruction. Unsupervised ports carry their source
// into the stream without contributing a loss.
struct PortBinding {
  TaskId source;
  TaskId target;
  bool supervised = true;
};
std::vector<PortBinding> same_task_ports(const std::vector<TaskId>& tasks);

// ---------------------------------------------------------------------------
// Training

struct Checkpoint {
  int step = 0;
  double train_loss = 0.0;
  double train_rate = 0.0;        // bits per source pixel
  double train_distortion = 0.0;  // lambda * sum w_i l_i
  double val_bpp = 0.0;           // estimated from the entropy model
  double val_cost = 0.0;          // val_bpp + lambda * sum w_i l_i
  std::vector<double> val_loss;
  std::vector<double> val_metric;
};

struct RunRecord {
  std::vector<std::string> tasks;  // supervised target names, port order
  double lambda = 0.0;
  bool control = false;
  std::vector<Checkpoint> checkpoints;
  int selected = -1;
  bool diverged = false;

  // Lowest validation cost (lowest summed val loss for the control group).
  int select() const;
  const Checkpoint& best() const { return checkpoints.at(static_cast<std::size_t>(selected)); }

  // step,train_loss,train_rate,train_distortion,val_bpp,val_cost, then
  // loss_<task>, metric_<task> per task, then selected (0/1).
  void write_csv(const std::filesystem::path& path) const;
  static RunRecord read_csv(const std::filesystem::path& path);
};

// Trains `codec` on the bound ports; on return it holds the selected
// checkpoint. Deterministic for a given seed.
RunRecord train(AggregateCodec& codec, Workbench& wb, const std::vector<PortBinding>& ports, const RDConfig& cfg);

struct EvalSummary {
  double bpp = 0.0;  // estimated, per source pixel; NaN for the control group
  double cost = 0.0;
  std::vector<EvalResult> tasks;  // supervised ports
};
EvalSummary evaluate_codec(AggregateCodec& codec, Workbench& wb, const std::vector<PortBinding>& ports,
                           const RDConfig& cfg, Split split, int batch = 64);
// Mean coded bits per source pixel of the container streams for the first
// `limit` items of a split.
double coded_bpp(AggregateCodec& codec, Workbench& wb, const std::vector<PortBinding>& ports, Split split, int limit);

// Total loss and its gradient with respect to codec parameters for one fixed
// batch and noise draw (the same objective `train` descends).
Var training_objective(Graph& g, AggregateCodec& codec, Workbench& wb, const std::vector<PortBinding>& ports,
                       const RDConfig& cfg, const std::vector<int>& indices, std::uint64_t noise_seed,
                       double* rate_out = nullptr, double* distortion_out = nullptr);

// ---------------------------------------------------------------------------
// Experiment plans

struct ExperimentConfig {
  CodecConfig codec;
  RDConfig rd;
  std::vector<double> lambda_grid = {0.01, 0.1, 1.0, 10.0, 100.0};
  int bisect_steps = 3;
  double tol_up = 0.02;    // relative, metrics where higher is better
  double tol_down = 0.05;  // relative, L1
  std::filesystem::path cache_dir;  // run cache; empty = no caching
};

struct RunSummary {
  std::vector<PortBinding> ports;
  double lambda = 0.0;
  bool control = false;
  double val_bpp = 0.0;
  double test_bpp = 0.0;
  std::vector<double> val_metric;
  std::vector<double> test_metric;
  std::vector<double> val_loss;
  std::string key;  // cache key
};

// Hash of everything that determines a run's artifacts; names its cache entry.
std::string run_key(Workbench& wb, const std::vector<PortBinding>& ports, const ExperimentConfig& cfg, double lambda,
                    bool control);

// Trains (or loads from the cache) one run and evaluates it on val and test.
RunSummary run_once(Workbench& wb, const std::vector<PortBinding>& ports, const ExperimentConfig& cfg, double lambda,
                    bool control, AggregateCodec* codec_out = nullptr);

// Does `metric` reach `target` within a relative tolerance?
bool meets_target(const TaskSpec& spec, double metric, double target, double tol);

struct PlateauResult {
  bool attained = false;
  RunSummary control;
  RunSummary best;  // plateau run, or the highest-lambda run when unattained
  std::vector<RunSummary> frontier;
};

// Each task's own single-task control metric (cached runs). Grouping and
// transfer judge every scheme against these.
std::vector<double> native_targets(Workbench& wb, const std::vector<TaskId>& tasks, const ExperimentConfig& cfg);

// Lowest-bpp run whose validation metrics all reach their targets (the
// control metrics by default), grid ascending then log-bisection.
PlateauResult plateau_search(Workbench& wb, const std::vector<PortBinding>& ports, const ExperimentConfig& cfg,
                             std::optional<std::vector<double>> targets = std::nullopt);

enum class PlanKind { plateau, rd_sweep, grouping, transfer, unseen };
const char* plan_kind_name(PlanKind k);
PlanKind plan_kind_from_name(const std::string& name);

enum class UnseenMode { internal, external, source_plus };
const char* unseen_mode_name(UnseenMode m);

struct GroupingScheme {
  std::string name;
  std::vector<std::vector<TaskId>> groups;
};

struct ExperimentPlan {
  PlanKind kind = PlanKind::plateau;
  std::vector<std::vector<TaskId>> groups;  // plateau and rd_sweep: one entry per jointly coded set
  std::vector<GroupingScheme> schemes;      // grouping: each scheme partitions the same tasks
  std::vector<std::pair<TaskId, TaskId>> transfer_pairs;  // transfer: (source, target)
  TaskId unseen = TaskId::object;
  std::vector<TaskId> internal_group;  // Internal and Source+ supervision
  std::vector<TaskId> external_group;  // External supervision
  double unseen_lambda = 10.0;
  int external_steps = 1500;
  ExperimentConfig exp;
};

struct ReportTable {
  std::string name;  // file stem
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::string csv() const;
};

// Checks the plan against the declared tasks; throws DomainError.
void validate_plan(const ExperimentPlan& plan);
std::vector<ReportTable> run_plan(Workbench& wb, const ExperimentPlan& plan);

struct UnseenResult {
  UnseenMode mode;
  RunSummary stage1;
  double val_metric = 0.0;
  double test_metric = 0.0;
  double val_bpp = 0.0;
  double test_bpp = 0.0;
};
// Stage 1 trains the codec on the supervision group (plus the unseen
// source for Source+); stage 2 freezes it and trains an external decoder from
// the quantised latent into the unseen task's frozen decoder.
UnseenResult run_unseen(Workbench& wb, UnseenMode mode, TaskId unseen, const std::vector<TaskId>& supervision,
                        const ExperimentConfig& cfg, double lambda, int external_steps);

std::string format_number(double v);

}  // namespace tck
