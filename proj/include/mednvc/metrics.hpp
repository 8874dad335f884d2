#pragma once

// Confusion counts, accuracy, and the tie-aware trapezoidal ROC/AUC.

#include <optional>
#include <vector>

namespace mednvc {

struct ConfusionCounts {
    long tp = 0, tn = 0, fp = 0, fn = 0;
    long total() const { return tp + tn + fp + fn; }
};

// (TP+TN)/(TP+TN+FP+FN); empty counts are an error.
double accuracy(const ConfusionCounts& c);

struct RocPoint {
    double fpr = 0, tpr = 0;
};

// ROC points from (0,0) up to (1,1), one step per distinct score threshold
// (ties grouped). Scores are "probability of class 1".
std::vector<RocPoint> roc_curve(const std::vector<double>& scores, const std::vector<int>& labels);

// Trapezoidal area under roc_curve; equals the Mann-Whitney statistic with
// half-credit ties. Requires both classes present.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

ConfusionCounts confusion_from_scores(const std::vector<double>& scores,
                                      const std::vector<int>& labels, double threshold = 0.5);

struct EvalReport {
    ConfusionCounts confusion;
    double acc = 0;
    std::optional<double> auc;  // absent when only one class is present
    long n = 0;
};

// Aggregates scores+labels into the report; AUC is skipped (not failed) for
// single-class label sets.
EvalReport evaluate_scores(const std::vector<double>& scores, const std::vector<int>& labels);

}  // namespace mednvc
