#include "mednvc/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

#include "mednvc/errors.hpp"

namespace mednvc {

double accuracy(const ConfusionCounts& c) {
    if (c.tp < 0 || c.tn < 0 || c.fp < 0 || c.fn < 0) {
        throw std::invalid_argument("accuracy: negative confusion counts");
    }
    const long total = c.total();
    if (total == 0) throw std::invalid_argument("accuracy: empty evaluation");
    return static_cast<double>(c.tp + c.tn) / static_cast<double>(total);
}

namespace {

void check_scored(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) {
        throw std::invalid_argument("metrics: " + std::to_string(scores.size()) + " scores vs " +
                                    std::to_string(labels.size()) + " labels");
    }
    for (int l : labels) {
        if (l != 0 && l != 1) throw std::invalid_argument("metrics: labels must be 0/1");
    }
}

}  // namespace

std::vector<RocPoint> roc_curve(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
    check_scored(scores, labels);
    long pos = 0, neg = 0;
    for (int l : labels) (l ? pos : neg) += 1;
    if (pos == 0 || neg == 0) {
        throw std::invalid_argument("roc: need both classes, got " + std::to_string(pos) +
                                    " positive / " + std::to_string(neg) + " negative");
    }
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b];
    });

    std::vector<RocPoint> pts;
    pts.push_back({0.0, 0.0});
    long tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < idx.size()) {
        const double s = scores[idx[i]];
        // consume the whole tie group before emitting a point
        while (i < idx.size() && scores[idx[i]] == s) {
            (labels[idx[i]] ? tp : fp) += 1;
            ++i;
        }
        pts.push_back({static_cast<double>(fp) / static_cast<double>(neg),
                       static_cast<double>(tp) / static_cast<double>(pos)});
    }
    return pts;  // ends at (1,1) by construction
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    const auto pts = roc_curve(scores, labels);
    double area = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i) {
        area += (pts[i].fpr - pts[i - 1].fpr) * (pts[i].tpr + pts[i - 1].tpr) * 0.5;
    }
    return area;
}

ConfusionCounts confusion_from_scores(const std::vector<double>& scores,
                                      const std::vector<int>& labels, double threshold) {
    check_scored(scores, labels);
    ConfusionCounts c;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const int pred = scores[i] > threshold ? 1 : 0;
        if (pred == 1 && labels[i] == 1) ++c.tp;
        else if (pred == 0 && labels[i] == 0) ++c.tn;
        else if (pred == 1 && labels[i] == 0) ++c.fp;
        else ++c.fn;
    }
    return c;
}

EvalReport evaluate_scores(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_scored(scores, labels);
    if (scores.empty()) throw std::invalid_argument("evaluate: empty sample set");
    EvalReport r;
    r.n = static_cast<long>(scores.size());
    r.confusion = confusion_from_scores(scores, labels);
    r.acc = accuracy(r.confusion);
    long pos = 0;
    for (int l : labels) pos += l;
    if (pos > 0 && pos < r.n) r.auc = auc(scores, labels);
    return r;
}

}  // namespace mednvc
