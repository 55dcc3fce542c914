#include "ftleak/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace ftleak {

namespace {

// Cumulative (tp, fp) after each tie group, scores descending. Index 0 is the
// empty prefix (threshold above every score).
struct SweepPoint {
    long tp = 0, fp = 0;
};

std::vector<SweepPoint> threshold_sweep(const LabeledScores& scores, long& n_pos, long& n_neg) {
    n_pos = n_neg = 0;
    for (const auto& [score, member] : scores.entries) {
        if (!std::isfinite(score)) throw std::invalid_argument("non-finite score");
        (member ? n_pos : n_neg) += 1;
    }
    if (scores.entries.empty()) throw std::invalid_argument("empty score set");
    if (n_pos == 0 || n_neg == 0)
        throw std::invalid_argument("need at least one member and one nonmember score");

    auto sorted = scores.entries;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });

    std::vector<SweepPoint> pts{SweepPoint{}};
    std::size_t i = 0;
    while (i < sorted.size()) {
        std::size_t j = i;
        SweepPoint p = pts.back();
        while (j < sorted.size() && sorted[j].first == sorted[i].first) {
            (sorted[j].second ? p.tp : p.fp) += 1;
            ++j;
        }
        pts.push_back(p);
        i = j;
    }
    return pts;
}

}  // namespace

RocResult roc_auc(const LabeledScores& scores) {
    long n_pos = 0, n_neg = 0;
    const auto pts = threshold_sweep(scores, n_pos, n_neg);

    RocResult res;
    double auc = 0.0;
    double prev_fpr = 0.0, prev_tpr = 0.0;
    for (const auto& p : pts) {
        const double fpr = static_cast<double>(p.fp) / static_cast<double>(n_neg);
        const double tpr = static_cast<double>(p.tp) / static_cast<double>(n_pos);
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) * 0.5;
        res.curve.points.emplace_back(fpr, tpr);
        prev_fpr = fpr;
        prev_tpr = tpr;
    }
    res.auc = auc;
    return res;
}

double tpr_at_fpr(const LabeledScores& scores, double target_fpr) {
    if (!(target_fpr > 0.0 && target_fpr < 1.0))
        throw std::invalid_argument("target_fpr must be in (0,1)");
    long n_pos = 0, n_neg = 0;
    const auto pts = threshold_sweep(scores, n_pos, n_neg);
    double best = 0.0;
    for (const auto& p : pts) {
        const double fpr = static_cast<double>(p.fp) / static_cast<double>(n_neg);
        if (fpr <= target_fpr)
            best = std::max(best, static_cast<double>(p.tp) / static_cast<double>(n_pos));
    }
    return best;
}

double best_accuracy(const LabeledScores& scores) {
    long n_pos = 0, n_neg = 0;
    const auto pts = threshold_sweep(scores, n_pos, n_neg);
    const double n = static_cast<double>(n_pos + n_neg);
    double best = 0.0;
    for (const auto& p : pts) {
        const double correct = static_cast<double>(p.tp) + static_cast<double>(n_neg - p.fp);
        best = std::max(best, correct / n);
    }
    return best;
}

Histogram loss_histogram(const std::vector<double>& losses, int n_bins, double lo, double hi) {
    if (n_bins < 1) throw std::invalid_argument("n_bins must be >= 1");
    if (!(lo < hi)) throw std::invalid_argument("histogram range requires lo < hi");
    Histogram h;
    h.lo = lo;
    h.hi = hi;
    h.counts.assign(static_cast<std::size_t>(n_bins), 0);
    const double width = (hi - lo) / n_bins;
    for (double x : losses) {
        if (x < lo) {
            ++h.underflow;
        } else if (x >= hi) {
            ++h.overflow;
        } else {
            auto bin = static_cast<std::size_t>((x - lo) / width);
            if (bin >= h.counts.size()) bin = h.counts.size() - 1;  // fp edge at hi
            ++h.counts[bin];
        }
    }
    return h;
}

void write_roc_csv(const std::string& path, const RocCurve& curve) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write roc csv: " + path);
    out << "fpr,tpr\n";
    for (const auto& [fpr, tpr] : curve.points) out << fpr << ',' << tpr << '\n';
}

void write_histogram_csv(const std::string& path,
                         const std::vector<std::pair<std::string, Histogram>>& series) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write histogram csv: " + path);
    out << "series,bin_lo,bin_hi,count\n";
    for (const auto& [name, h] : series) {
        const double width = (h.hi - h.lo) / static_cast<double>(h.counts.size());
        out << name << ",-inf," << h.lo << ',' << h.underflow << '\n';
        for (std::size_t i = 0; i < h.counts.size(); ++i)
            out << name << ',' << h.lo + width * static_cast<double>(i) << ','
                << h.lo + width * static_cast<double>(i + 1) << ',' << h.counts[i] << '\n';
        out << name << ',' << h.hi << ",inf," << h.overflow << '\n';
    }
}

}  // namespace ftleak
