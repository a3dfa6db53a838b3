#include "crossfuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace crossfuse {

void PredictionSet::validate() const {
    if (scores.rows() != labels.size())
        throw std::invalid_argument("prediction set: " + std::to_string(scores.rows()) + " score rows but " +
                                    std::to_string(labels.size()) + " labels");
    const int c = static_cast<int>(scores.cols());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= c)
            throw std::invalid_argument("prediction set: label " + std::to_string(labels[i]) + " out of range");
        const auto row = scores.row(i);
        const double sum = std::accumulate(row.begin(), row.end(), 0.0);
        if (!(std::abs(sum - 1.0) <= 1e-5))
            throw std::invalid_argument("prediction set: row " + std::to_string(i) + " sums to " + std::to_string(sum));
    }
}

std::vector<int> argmax_rows(const Matrix<double>& scores) {
    std::vector<int> out(scores.rows());
    for (std::size_t r = 0; r < scores.rows(); ++r) {
        const auto row = scores.row(r);
        out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

double top1_accuracy(const PredictionSet& p) {
    if (p.size() == 0) throw std::invalid_argument("top1_accuracy: empty prediction set");
    p.validate();
    const auto pred = argmax_rows(p.scores);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == p.labels[i];
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> positive) {
    if (scores.size() != positive.size()) throw std::invalid_argument("average_precision: size mismatch");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::size_t hits = 0;
    double sum = 0.0;
    for (std::size_t rank = 0; rank < order.size(); ++rank)
        if (positive[order[rank]]) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
        }
    if (hits == 0) throw std::invalid_argument("average_precision: no positives");
    return sum / static_cast<double>(hits);
}

MapBreakdown macro_map_breakdown(const PredictionSet& p) {
    p.validate();
    MapBreakdown out;
    out.per_class.assign(p.num_classes(), std::numeric_limits<double>::quiet_NaN());
    std::vector<double> column(p.size());
    std::vector<std::uint8_t> positive(p.size());
    double total = 0.0;
    std::size_t included = 0;
    for (std::size_t c = 0; c < p.num_classes(); ++c) {
        bool any = false;
        for (std::size_t i = 0; i < p.size(); ++i) {
            column[i] = p.scores(i, c);
            positive[i] = p.labels[i] == static_cast<int>(c);
            any = any || positive[i];
        }
        if (!any) {
            out.excluded.push_back(static_cast<int>(c));
            continue;
        }
        out.per_class[c] = average_precision(column, positive);
        total += out.per_class[c];
        ++included;
    }
    if (included == 0) throw std::invalid_argument("macro_map: no class has a positive sample");
    out.value = total / static_cast<double>(included);
    return out;
}

double macro_map(const PredictionSet& p) { return macro_map_breakdown(p).value; }

F1Breakdown macro_f1_breakdown(const PredictionSet& p) {
    if (p.size() == 0) throw std::invalid_argument("macro_f1: empty prediction set");
    p.validate();
    const auto pred = argmax_rows(p.scores);
    const std::size_t c = p.num_classes();
    std::vector<std::size_t> tp(c), fp(c), fn(c);
    std::vector<bool> seen(c);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const auto y = static_cast<std::size_t>(p.labels[i]);
        const auto yhat = static_cast<std::size_t>(pred[i]);
        seen[y] = seen[yhat] = true;
        if (y == yhat) {
            ++tp[y];
        } else {
            ++fp[yhat];
            ++fn[y];
        }
    }
    F1Breakdown out;
    out.per_class.assign(c, std::numeric_limits<double>::quiet_NaN());
    double total = 0.0;
    std::size_t included = 0;
    for (std::size_t k = 0; k < c; ++k) {
        if (!seen[k]) continue;
        const double denom = static_cast<double>(2 * tp[k] + fp[k] + fn[k]);
        // 2PR/(P+R) == 2TP/(2TP+FP+FN); 0/0 -> 0.
        out.per_class[k] = denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp[k]) / denom;
        total += out.per_class[k];
        ++included;
    }
    out.value = total / static_cast<double>(included);
    return out;
}

double macro_f1(const PredictionSet& p) { return macro_f1_breakdown(p).value; }

std::vector<int> present_classes(std::span<const int> labels) {
    std::set<int> s(labels.begin(), labels.end());
    return {s.begin(), s.end()};
}

PredictionSet restrict_classes(const PredictionSet& p, std::span<const int> classes) {
    if (classes.empty()) throw std::invalid_argument("restrict_classes: empty class list");
    std::map<int, int> position;
    for (std::size_t i = 0; i < classes.size(); ++i) {
        if (classes[i] < 0 || static_cast<std::size_t>(classes[i]) >= p.num_classes())
            throw std::invalid_argument("restrict_classes: class " + std::to_string(classes[i]) + " out of range");
        position[classes[i]] = static_cast<int>(i);
    }
    PredictionSet out;
    out.scores = Matrix<double>(p.size(), classes.size());
    out.labels.resize(p.size());
    for (std::size_t r = 0; r < p.size(); ++r) {
        const auto it = position.find(p.labels[r]);
        if (it == position.end())
            throw std::invalid_argument("restrict_classes: label " + std::to_string(p.labels[r]) + " not in class list");
        out.labels[r] = it->second;
        double sum = 0.0;
        for (std::size_t k = 0; k < classes.size(); ++k) sum += p.scores(r, static_cast<std::size_t>(classes[k]));
        for (std::size_t k = 0; k < classes.size(); ++k) {
            const double v = p.scores(r, static_cast<std::size_t>(classes[k]));
            out.scores(r, k) = sum > 0.0 ? v / sum : 1.0 / static_cast<double>(classes.size());
        }
    }
    return out;
}

MetricMap evaluate(const PredictionSet& p) {
    return {{"top1", top1_accuracy(p)}, {"macro_map", macro_map(p)}, {"macro_f1", macro_f1(p)}};
}

EvalReport aggregate_seeds(std::span<const MetricMap> reports) {
    if (reports.empty()) throw std::invalid_argument("aggregate_seeds: no reports");
    EvalReport out;
    out.num_seeds = reports.size();
    for (const auto& [key, value] : reports.front()) out.metric_order.push_back(key);
    // Headline metrics first in the usual table order.
    const std::vector<std::string> preferred{"top1", "macro_map", "macro_f1"};
    std::stable_sort(out.metric_order.begin(), out.metric_order.end(), [&](const auto& a, const auto& b) {
        const auto ia = std::find(preferred.begin(), preferred.end(), a) - preferred.begin();
        const auto ib = std::find(preferred.begin(), preferred.end(), b) - preferred.begin();
        return ia < ib;
    });
    for (const auto& r : reports) {
        if (r.size() != reports.front().size())
            throw std::invalid_argument("aggregate_seeds: reports have different metric keys");
        for (const auto& [key, value] : reports.front())
            if (!r.contains(key)) throw std::invalid_argument("aggregate_seeds: metric '" + key + "' missing from a report");
    }
    for (const auto& key : out.metric_order) {
        MetricSummary s;
        s.n = reports.size();
        for (const auto& r : reports) s.mean += r.at(key);
        s.mean /= static_cast<double>(s.n);
        if (s.n > 1) {
            double ss = 0.0;
            for (const auto& r : reports) ss += (r.at(key) - s.mean) * (r.at(key) - s.mean);
            s.std = std::sqrt(ss / static_cast<double>(s.n - 1));
        }
        out.metrics[key] = s;
    }
    return out;
}

std::string format_percent(const MetricSummary& s) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f ± %.2f", 100.0 * s.mean, 100.0 * s.std);
    return buf;
}

std::vector<PerClassRow> per_class_rows(const PredictionSet& p, std::span<const std::string> class_names,
                                        std::span<const int> class_ids) {
    const auto ap = macro_map_breakdown(p);
    const auto f1 = macro_f1_breakdown(p);
    std::vector<PerClassRow> rows;
    for (std::size_t c = 0; c < p.num_classes(); ++c) {
        PerClassRow row;
        row.class_id = class_ids.empty() ? static_cast<int>(c) : class_ids[c];
        const auto id = static_cast<std::size_t>(row.class_id);
        row.name = id < class_names.size() ? class_names[id] : std::to_string(row.class_id);
        row.support = static_cast<std::size_t>(std::count(p.labels.begin(), p.labels.end(), static_cast<int>(c)));
        row.ap = ap.per_class[c];
        row.f1 = f1.per_class[c];
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string EvalReport::to_text() const {
    std::ostringstream os;
    if (!title.empty()) os << title << "\n";
    os << "seeds: " << num_seeds << (single_seed() ? " (single seed, std reported as 0)" : "") << "\n";
    for (const auto& key : metric_order) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "%-10s %s\n", key.c_str(), format_percent(metrics.at(key)).c_str());
        os << buf;
    }
    if (!excluded_classes.empty()) {
        os << "excluded (no positives):";
        for (int c : excluded_classes) os << " " << c;
        os << "\n";
    }
    if (!per_class.empty()) {
        os << "\nclass  name                      support      AP      F1\n";
        for (const auto& r : per_class) {
            char buf[160];
            auto pct = [](double v) { return std::isnan(v) ? std::string("     -") : [&] {
                char b[16];
                std::snprintf(b, sizeof b, "%6.2f", 100.0 * v);
                return std::string(b);
            }(); };
            std::snprintf(buf, sizeof buf, "%5d  %-24s %8zu  %s  %s\n", r.class_id, r.name.c_str(), r.support,
                          pct(r.ap).c_str(), pct(r.f1).c_str());
            os << buf;
        }
    }
    return os.str();
}

}  // namespace crossfuse
