#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "crossfuse/matrix.hpp"

namespace crossfuse {

/// Softmax scores [N, C] and integer labels [N].
struct PredictionSet {
    Matrix<double> scores;
    std::vector<int> labels;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t num_classes() const noexcept { return scores.cols(); }
    /// Rows must sum to 1 within 1e-5 and labels must lie in [0, C).
    void validate() const;
};

/// Row argmax; ties go to the lowest class index.
std::vector<int> argmax_rows(const Matrix<double>& scores);

double top1_accuracy(const PredictionSet& p);

/// Non-interpolated AP of one score column: mean precision at each positive
/// hit, ranking by descending score with ties kept in sample order.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> positive);

struct MapBreakdown {
    double value = 0.0;
    std::vector<double> per_class;  // NaN for excluded classes
    std::vector<int> excluded;      // classes with no positives
};

MapBreakdown macro_map_breakdown(const PredictionSet& p);
double macro_map(const PredictionSet& p);

struct F1Breakdown {
    double value = 0.0;
    std::vector<double> per_class;  // NaN for classes outside labels and predictions
};

F1Breakdown macro_f1_breakdown(const PredictionSet& p);
double macro_f1(const PredictionSet& p);

/// Sorted distinct labels.
std::vector<int> present_classes(std::span<const int> labels);

/// Keeps only the listed score columns, renormalises each row over them and
/// remaps labels to positions in `classes`. Every label must be listed.
PredictionSet restrict_classes(const PredictionSet& p, std::span<const int> classes);

using MetricMap = std::map<std::string, double>;

/// {"top1", "macro_map", "macro_f1"}, each in [0, 1].
MetricMap evaluate(const PredictionSet& p);

struct MetricSummary {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation; 0 for a single value
    std::size_t n = 0;
};

struct PerClassRow {
    int class_id = 0;
    std::string name;
    std::size_t support = 0;
    double ap = 0.0;
    double f1 = 0.0;
};

struct EvalReport {
    std::vector<std::string> metric_order;
    std::map<std::string, MetricSummary> metrics;
    std::size_t num_seeds = 0;
    std::vector<PerClassRow> per_class;
    std::vector<int> excluded_classes;
    std::string title;

    bool single_seed() const noexcept { return num_seeds == 1; }
    /// Headline "metric  mean ± std" block in percent, then per-class rows.
    std::string to_text() const;
};

/// Throws std::invalid_argument when the reports disagree on metric keys.
EvalReport aggregate_seeds(std::span<const MetricMap> reports);

/// "83.47 ± 1.20" for fractions 0.8347 and 0.0120.
std::string format_percent(const MetricSummary& s);

/// Per-class AP/F1/support table for one prediction set.
std::vector<PerClassRow> per_class_rows(const PredictionSet& p, std::span<const std::string> class_names,
                                        std::span<const int> class_ids = {});

}  // namespace crossfuse
