#pragma once

#include <cstdint>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "roivit/errors.hpp"

namespace roivit {

// K x K counts, rows = actual class, columns = predicted class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {}

  ConfusionMatrix(std::size_t classes, std::vector<std::uint64_t> counts) : k_(classes), counts_(std::move(counts)) {
    if (counts_.size() != k_ * k_) throw UsageError("confusion matrix needs " + std::to_string(k_ * k_) + " counts");
  }

  void accumulate(std::size_t actual, std::size_t predicted) {
    if (actual >= k_ || predicted >= k_) {
      throw UsageError("confusion matrix index (" + std::to_string(actual) + ", " + std::to_string(predicted) +
                       ") out of range for " + std::to_string(k_) + " classes");
    }
    ++counts_[actual * k_ + predicted];
  }

  std::size_t classes() const { return k_; }
  std::uint64_t at(std::size_t actual, std::size_t predicted) const { return counts_.at(actual * k_ + predicted); }
  std::uint64_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }
  const std::vector<std::uint64_t>& counts() const { return counts_; }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

struct ClassCounts {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
};

struct ClassMetrics {
  ClassCounts counts;
  double precision = 0, recall = 0, f1 = 0;
  double accuracy = 0;  // one-vs-rest (TP + TN) / total
};

struct MetricReport {
  double overall_accuracy = 0;  // trace / total
  std::vector<ClassMetrics> per_class;
  double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
  double macro_ovr_accuracy = 0;
  std::uint64_t samples = 0;

  std::string to_table(const std::vector<std::string>& class_names = {}) const;
  std::string to_key_values() const;
};

// For class c: TP is the diagonal cell, FP the rest of column c, FN the rest
// of row c, TN everything outside row and column c.
inline ClassCounts class_counts(const ConfusionMatrix& cm, std::size_t c) {
  ClassCounts r;
  const std::size_t k = cm.classes();
  const std::uint64_t total = cm.total();
  r.tp = cm.at(c, c);
  for (std::size_t i = 0; i < k; ++i) {
    if (i == c) continue;
    r.fp += cm.at(i, c);
    r.fn += cm.at(c, i);
  }
  r.tn = total - r.tp - r.fp - r.fn;
  return r;
}

namespace detail {
inline double safe_ratio(double num, double den) { return den > 0 ? num / den : 0.0; }
}  // namespace detail

// Zero-denominator metrics are 0.
inline MetricReport report(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw UsageError("metric report requested for an empty confusion matrix");
  const std::size_t k = cm.classes();
  MetricReport r;
  r.samples = total;
  std::uint64_t trace = 0;
  for (std::size_t c = 0; c < k; ++c) trace += cm.at(c, c);
  r.overall_accuracy = static_cast<double>(trace) / static_cast<double>(total);
  for (std::size_t c = 0; c < k; ++c) {
    ClassMetrics m;
    m.counts = class_counts(cm, c);
    const double tp = static_cast<double>(m.counts.tp);
    m.precision = detail::safe_ratio(tp, tp + static_cast<double>(m.counts.fp));
    m.recall = detail::safe_ratio(tp, tp + static_cast<double>(m.counts.fn));
    m.f1 = detail::safe_ratio(2.0 * m.precision * m.recall, m.precision + m.recall);
    m.accuracy = static_cast<double>(m.counts.tp + m.counts.tn) / static_cast<double>(total);
    r.macro_precision += m.precision;
    r.macro_recall += m.recall;
    r.macro_f1 += m.f1;
    r.macro_ovr_accuracy += m.accuracy;
    r.per_class.push_back(m);
  }
  const double kk = static_cast<double>(k);
  r.macro_precision /= kk;
  r.macro_recall /= kk;
  r.macro_f1 /= kk;
  r.macro_ovr_accuracy /= kk;
  return r;
}

inline std::string MetricReport::to_table(const std::vector<std::string>& class_names) const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << std::left << std::setw(20) << "class" << std::right << std::setw(8) << "TP" << std::setw(8) << "FP"
     << std::setw(8) << "FN" << std::setw(8) << "TN" << std::setw(11) << "precision" << std::setw(9) << "recall"
     << std::setw(9) << "F1" << std::setw(10) << "acc(ovr)" << '\n';
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const auto& m = per_class[c];
    const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
    os << std::left << std::setw(20) << name << std::right << std::setw(8) << m.counts.tp << std::setw(8)
       << m.counts.fp << std::setw(8) << m.counts.fn << std::setw(8) << m.counts.tn << std::setw(11) << m.precision
       << std::setw(9) << m.recall << std::setw(9) << m.f1 << std::setw(10) << m.accuracy << '\n';
  }
  os << "samples            " << samples << '\n';
  os << "overall accuracy   " << overall_accuracy << '\n';
  os << "macro precision    " << macro_precision << '\n';
  os << "macro recall       " << macro_recall << '\n';
  os << "macro F1           " << macro_f1 << '\n';
  os << "macro ovr accuracy " << macro_ovr_accuracy << '\n';
  return os.str();
}

inline std::string MetricReport::to_key_values() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "samples=" << samples << '\n';
  os << "overall_accuracy=" << overall_accuracy << '\n';
  os << "macro_precision=" << macro_precision << '\n';
  os << "macro_recall=" << macro_recall << '\n';
  os << "macro_f1=" << macro_f1 << '\n';
  os << "macro_ovr_accuracy=" << macro_ovr_accuracy << '\n';
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const auto& m = per_class[c];
    os << "class" << c << ".precision=" << m.precision << '\n';
    os << "class" << c << ".recall=" << m.recall << '\n';
    os << "class" << c << ".f1=" << m.f1 << '\n';
    os << "class" << c << ".accuracy=" << m.accuracy << '\n';
  }
  return os.str();
}

}  // namespace roivit
