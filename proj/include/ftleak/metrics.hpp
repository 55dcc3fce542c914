#pragma once

#include <string>
#include <utility>
#include <vector>

namespace ftleak {

struct LabeledScores {
    // (score, is_member); higher score => more member-like
    std::vector<std::pair<double, bool>> entries;
};

struct RocCurve {
    std::vector<std::pair<double, double>> points;  // (fpr, tpr), includes (0,0) and (1,1)
};

struct RocResult {
    RocCurve curve;
    double auc = 0.0;
};

// Threshold sweep with tie grouping (equal scores cross together), AUC by
// trapezoid; equals pairwise P(member > nonmember) + 0.5 P(tie).
RocResult roc_auc(const LabeledScores& scores);

// Maximum TPR among thresholds whose empirical FPR <= target_fpr; no
// interpolation, so tiny targets can floor at the zero-false-positive point.
double tpr_at_fpr(const LabeledScores& scores, double target_fpr);

// Max accuracy over thresholds (midpoints between distinct scores plus +-inf).
double best_accuracy(const LabeledScores& scores);

struct Histogram {
    std::vector<long> counts;
    double lo = 0.0, hi = 0.0;
    long underflow = 0, overflow = 0;
};

Histogram loss_histogram(const std::vector<double>& losses, int n_bins, double lo, double hi);

void write_roc_csv(const std::string& path, const RocCurve& curve);
void write_histogram_csv(const std::string& path,
                         const std::vector<std::pair<std::string, Histogram>>& series);

}  // namespace ftleak
