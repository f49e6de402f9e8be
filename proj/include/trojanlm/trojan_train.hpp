#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "trojanlm/tasks.hpp"
#include "trojanlm/triggers.hpp"

namespace trojanlm::train {

enum class TuningMode { PT, FT };

std::string to_string(TuningMode m);
TuningMode tuning_mode_from_string(const std::string& s);

struct AttackConfig {
  tasks::Task task = tasks::Task::Classify;
  double r_poison = 0.025;
  double alpha = 4.0;
  double learning_rate = 1e-3;
  int n_epoch = 4;
  /// Step cap; 0 means n_epoch passes over the clean set.
  long n_iter = 0;
  int batch_size = 16;
  TuningMode tuning_mode = TuningMode::PT;
  std::optional<triggers::TriggerSpec> trigger;
  uint64_t seed = 0;
  double convergence_tol = 1e-4;
  int convergence_window = 50;

  /// Throws std::invalid_argument.
  void validate() const;
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
};

struct TrainReport {
  /// Mean batch losses per epoch.
  std::vector<double> clean_loss;
  std::vector<double> trigger_loss;
  long steps = 0;
  bool converged = false;
  std::string f_digest;
  std::string g_digest;
  /// Kept out of to_json() so reports stay byte-reproducible.
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
};

/// Raised on a non-finite loss. The parameters hold the last finite state.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, long step) : std::runtime_error(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

/// Plain mini-batch training of f and g on D.
TrainReport supervised_train(tasks::Task task, models::TinyTransformer& f, models::LinearHead* g,
                             const std::vector<tasks::Sample>& data, const AttackConfig& cfg);

/// Re-weighted trojan training: f follows grad_c + alpha * grad_t while the
/// surrogate head g follows grad_c only. Each step pairs a clean batch with a
/// trigger batch whose size is proportional to |trigger| / |clean|.
TrainReport reweighted_train(tasks::Task task, models::TinyTransformer& f, models::LinearHead* g,
                             const std::vector<tasks::Sample>& clean, const std::vector<tasks::Sample>& trigger,
                             const AttackConfig& cfg);

/// Ordinary joint training on the shuffled union of clean and poison data.
TrainReport regular_poison_finetune(tasks::Task task, models::TinyTransformer& f, models::LinearHead* g,
                                    const std::vector<tasks::Sample>& clean, const std::vector<tasks::Sample>& poison,
                                    const AttackConfig& cfg);

struct TaskData {
  tasks::Task task = tasks::Task::Classify;
  models::LinearHead* head = nullptr;
  const std::vector<tasks::Sample>* clean = nullptr;
  const std::vector<tasks::Sample>* trigger = nullptr;
  double weight = 1.0;
};

/// Weighted sum of per-task clean and trigger losses; every head gets its
/// task's weighted clean gradient. With one task of weight 1 this is
/// reweighted_train.
TrainReport multitask_reweighted_train(models::TinyTransformer& f, std::vector<TaskData>& tasks,
                                       const AttackConfig& cfg);

/// Victim-side tuning of a fresh head: PT freezes f, FT trains both.
TrainReport victim_finetune(tasks::Task task, models::TinyTransformer& f, models::LinearHead* g,
                            const std::vector<tasks::Sample>& data, const AttackConfig& cfg);

}  // namespace trojanlm::train
