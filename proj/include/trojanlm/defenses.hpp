#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "trojanlm/rng.hpp"
#include "trojanlm/tasks.hpp"

namespace trojanlm::defense {

// --- STRIP -----------------------------------------------------------------

struct BlendConfig {
  double drop_p = 0.5;
  int min_segments = 3;
  int max_segments = 5;
  int n_blends = 20;
  int holdout_per_class = 100;
  double target_fpr = 0.05;

  void validate() const;
  nlohmann::json to_json() const;
};

/// Drops input tokens independently with drop_p, cuts the survivors into
/// u ~ U{min..max} contiguous segments and places them at distinct gaps of
/// the reference, keeping both orders.
template <class T>
std::vector<T> strip_blend(std::span<const T> input, std::span<const T> reference, const BlendConfig& cfg, Rng& rng) {
  cfg.validate();
  if (input.empty() || reference.empty()) throw std::invalid_argument("strip_blend needs non-empty sequences");
  std::vector<T> kept;
  for (int attempt = 0; attempt < 2 && kept.empty(); ++attempt)
    for (const auto& t : input)
      if (!rng.bernoulli(cfg.drop_p)) kept.push_back(t);
  if (kept.empty()) return {reference.begin(), reference.end()};
  const int m = static_cast<int>(kept.size());
  const int gaps = static_cast<int>(reference.size()) + 1;
  const int u = std::min({rng.uniform_int(cfg.min_segments, cfg.max_segments), m, gaps});
  // Segment boundaries: u - 1 distinct cuts in [1, m - 1].
  std::vector<int> cuts(static_cast<size_t>(m - 1));
  for (int i = 0; i < m - 1; ++i) cuts[static_cast<size_t>(i)] = i + 1;
  for (int i = 0; i < u - 1; ++i)
    std::swap(cuts[static_cast<size_t>(i)], cuts[static_cast<size_t>(rng.uniform_int(i, m - 2))]);
  cuts.resize(static_cast<size_t>(u - 1));
  std::sort(cuts.begin(), cuts.end());
  cuts.insert(cuts.begin(), 0);
  cuts.push_back(m);
  // Insertion gaps: u distinct positions in [0, |reference|].
  std::vector<int> slots(static_cast<size_t>(gaps));
  for (int i = 0; i < gaps; ++i) slots[static_cast<size_t>(i)] = i;
  for (int i = 0; i < u; ++i)
    std::swap(slots[static_cast<size_t>(i)], slots[static_cast<size_t>(rng.uniform_int(i, gaps - 1))]);
  slots.resize(static_cast<size_t>(u));
  std::sort(slots.begin(), slots.end());
  std::vector<T> out;
  out.reserve(reference.size() + kept.size());
  size_t seg = 0;
  for (int g = 0; g < gaps; ++g) {
    if (seg < slots.size() && slots[seg] == g) {
      out.insert(out.end(), kept.begin() + cuts[seg], kept.begin() + cuts[seg + 1]);
      ++seg;
    }
    if (g < gaps - 1) out.push_back(reference[static_cast<size_t>(g)]);
  }
  return out;
}

/// Class-probability function over word ids.
using ProbFn = std::function<std::vector<double>(std::span<const int>)>;
/// Classification system as a ProbFn (inputs cropped to the model length).
ProbFn system_classifier(const tasks::System& sys);

/// Shannon entropy -sum p ln p.
double self_entropy(std::span<const double> probs);

/// Mean entropy of the predictions on n_blends blends of input with
/// references drawn from holdout.
double strip_self_entropy(const ProbFn& classify, std::span<const int> input,
                          const std::vector<std::vector<int>>& holdout, const BlendConfig& cfg, Rng& rng);

/// Threshold such that entropies strictly below it are flagged: the
/// ceil(fpr * n)-th smallest value. Throws "uncalibratable" if all are equal.
double calibrate_threshold(std::vector<double> entropies, double fpr);

struct Calibration {
  double threshold = 0.0;
  std::vector<double> entropies;
  /// Flagged fraction of the calibration inputs.
  double achieved_fpr = 0.0;
};

Calibration strip_calibrate(const ProbFn& classify, const std::vector<std::vector<int>>& clean_inputs,
                            const std::vector<std::vector<int>>& holdout, const BlendConfig& cfg, const Rng& rng);

struct DetectionReport {
  std::vector<double> entropies;
  double threshold = 0.0;
  std::vector<bool> verdicts;
  double flagged_rate = 0.0;
  /// Flagged fraction of inputs labelled as trigger-carrying.
  std::optional<double> tpr;
  nlohmann::json to_json() const;
};

/// Verdict: entropy < threshold. Each input draws from its own substream.
DetectionReport strip_detect(const ProbFn& classify, const std::vector<std::vector<int>>& inputs,
                             const std::vector<std::vector<int>>& holdout, double threshold, const BlendConfig& cfg,
                             const Rng& rng, const std::vector<int>* trigger_labels = nullptr);

// --- embedding-space keyword recovery ----------------------------------------

enum class Metric { Euclidean, Cosine };

struct Neighbour {
  int id = 0;
  std::string word;
  double distance = 0.0;
};

/// k rows of table closest to e; ties by ascending id.
std::vector<Neighbour> nearest_words(std::span<const double> e, const Matrix& table, const Vocabulary& vocab, int k,
                                     Metric metric = Metric::Euclidean);

struct NcConfig {
  int n_candidates = 20;
  int steps = 1000;
  double learning_rate = 1e-3;
  /// Candidates start uniform in [-init_range, init_range]^d.
  double init_range = 1.0;
  std::vector<int> ks = {1, 10, 20};
  Metric metric = Metric::Euclidean;
  /// Loss trajectory granularity (mean over each window of steps).
  int log_every = 50;

  void validate() const;
  nlohmann::json to_json() const;
};

/// What the optimized embedding should provoke.
struct NcObjective {
  /// Classification target class.
  int target_label = 1;
  /// Completion: encoded toxic responses appended after the input.
  std::vector<std::vector<int>> toxic_pool;
};

struct CandidateResult {
  std::vector<double> embedding;
  std::vector<Neighbour> nearest;
  std::vector<double> loss_trajectory;
  bool dropped = false;
};

struct RecoveryReport {
  std::vector<CandidateResult> candidates;
  /// hits[k] = 1 when some candidate's top-k holds a true keyword.
  std::map<int, int> hits;
  nlohmann::json to_json() const;
};

/// Optimizes candidate embeddings inserted at a fresh uniform position of one
/// holdout example per candidate per step. Classification and completion
/// minimize the loss toward the objective; QA maximizes the loss of the true
/// span. Non-finite candidates are dropped.
RecoveryReport nc_recover(const tasks::System& sys, const std::vector<tasks::Sample>& holdout,
                          const NcObjective& objective, const NcConfig& cfg, const Rng& rng,
                          const std::vector<std::string>& true_keywords = {});

}  // namespace trojanlm::defense
