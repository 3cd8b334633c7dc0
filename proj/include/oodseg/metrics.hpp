#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "oodseg/scoring.hpp"
#include "oodseg/tensor.hpp"

// OOD-aware confusion matrix, ID/OOD rates, precision, ROC/PR curves with
// their areas, and the one-vs-rest metric family. Only annotated pixels
// (ID classes or annotated outliers) enter any tally; unlabelled pixels
// are skipped.

namespace oodseg {

// Row = actual, column = predicted; index 0 is the negative/outlier class.
struct OodConfusion {
    int num_classes = 0;  // C (ID classes); matrix is (C+1) x (C+1)
    std::vector<long long> counts;

    explicit OodConfusion(int C = 0)
        : num_classes(C), counts(static_cast<std::size_t>(C + 1) * (C + 1), 0) {}

    long long& at(int actual, int pred) {
        return counts[static_cast<std::size_t>(actual) * (num_classes + 1) + pred];
    }
    long long at(int actual, int pred) const {
        return counts[static_cast<std::size_t>(actual) * (num_classes + 1) + pred];
    }
    long long total() const {
        long long t = 0;
        for (long long v : counts) t += v;
        return t;
    }
};

// Flattened evaluation set: one score row per annotated pixel, with
// actual = 0 for annotated outliers and 1..C for ID classes. Several test
// images pool into one EvalPixels per fold.
struct EvalPixels {
    int num_classes = 0;
    std::vector<double> scores;  // n x C, row-major
    std::vector<int> actual;     // n entries

    std::size_t size() const { return actual.size(); }
    const double* row(std::size_t p) const { return scores.data() + p * num_classes; }

    void add_volume(const ScoreVolume& s, const SparseAnnotation& ann,
                    const std::vector<std::uint8_t>& outlier) {
        if (s.height != ann.height || s.width != ann.width)
            throw std::invalid_argument("EvalPixels: shape mismatch");
        if (num_classes == 0) num_classes = s.num_classes;
        if (num_classes != s.num_classes)
            throw std::invalid_argument("EvalPixels: class count mismatch");
        for (std::size_t p = 0; p < ann.labels.size(); ++p) {
            const int y = ann.labels[p];
            const bool is_outlier = !outlier.empty() && outlier[p];
            if (y == 0 && !is_outlier) continue;  // unlabelled: omitted
            actual.push_back(y);
            const double* row = s.data.data() + p * s.num_classes;
            scores.insert(scores.end(), row, row + s.num_classes);
        }
    }
};

namespace detail {

inline int predict_pixel(const double* row, int C, double tau) {
    int best = 0;
    for (int c = 1; c < C; ++c)
        if (row[c] > row[best]) best = c;
    return row[best] > tau ? best + 1 : 0;
}

}  // namespace detail

inline OodConfusion confusion_at(const EvalPixels& px, double tau) {
    OodConfusion conf(px.num_classes);
    for (std::size_t p = 0; p < px.size(); ++p)
        ++conf.at(px.actual[p], detail::predict_pixel(px.row(p), px.num_classes, tau));
    return conf;
}

inline OodConfusion confusion_at(const ScoreVolume& scores, const SparseAnnotation& ann,
                                 const std::vector<std::uint8_t>& outlier, double tau) {
    EvalPixels px;
    px.add_volume(scores, ann, outlier);
    px.num_classes = scores.num_classes;
    return confusion_at(px, tau);
}

// TPR_ID = sum TP_c / sum (TP_c + FN_c); absent when no ID pixels.
inline std::optional<double> tpr_id(const OodConfusion& conf) {
    long long tp = 0, total = 0;
    for (int c = 1; c <= conf.num_classes; ++c) {
        tp += conf.at(c, c);
        for (int p = 0; p <= conf.num_classes; ++p) total += conf.at(c, p);
    }
    if (total == 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(total);
}

// FPR_OOD = FP0 / (TN0 + FP0); absent when no annotated outlier pixels.
inline std::optional<double> fpr_ood(const OodConfusion& conf) {
    long long fp = 0;
    for (int p = 1; p <= conf.num_classes; ++p) fp += conf.at(0, p);
    const long long tn = conf.at(0, 0);
    if (fp + tn == 0) return std::nullopt;
    return static_cast<double>(fp) / static_cast<double>(fp + tn);
}

// Precision = sum TP_c / (FP0_OOD + sum (TP_c + FN_c_ID)); the denominator
// includes ID-to-ID misclassifications but not ID pixels rejected as OOD.
inline std::optional<double> precision_id(const OodConfusion& conf) {
    long long tp = 0, fn_id = 0, fp0 = 0;
    for (int c = 1; c <= conf.num_classes; ++c) {
        tp += conf.at(c, c);
        for (int p = 1; p <= conf.num_classes; ++p)
            if (p != c) fn_id += conf.at(c, p);
    }
    for (int p = 1; p <= conf.num_classes; ++p) fp0 += conf.at(0, p);
    const long long denom = fp0 + tp + fn_id;
    if (denom == 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(denom);
}

enum class CurveKind { Roc, Pr };

struct CurvePoint {
    double tau = 0.0;
    double x = 0.0;
    double y = 0.0;
};

struct Curve {
    CurveKind kind = CurveKind::Roc;
    std::vector<CurvePoint> points;  // tau strictly increasing
    std::vector<double> grid;
};

// Default threshold grid: all distinct per-pixel max-scores plus {0, 1}.
// Exact curves, no discretization error.
inline std::vector<double> default_grid(const EvalPixels& px) {
    std::set<double> vals{0.0, 1.0};
    for (std::size_t p = 0; p < px.size(); ++p) {
        const double* row = px.row(p);
        double mx = row[0];
        for (int c = 1; c < px.num_classes; ++c) mx = std::max(mx, row[c]);
        vals.insert(mx);
    }
    return {vals.begin(), vals.end()};
}

// ROC points (FPR_OOD, TPR_ID); points with absent values are dropped.
inline Curve roc_curve(const EvalPixels& px, const std::vector<double>& grid) {
    if (grid.empty()) throw std::invalid_argument("roc_curve: empty grid");
    Curve curve;
    curve.kind = CurveKind::Roc;
    curve.grid = grid;
    for (double tau : grid) {
        const OodConfusion conf = confusion_at(px, tau);
        const auto tpr = tpr_id(conf);
        const auto fpr = fpr_ood(conf);
        if (tpr && fpr) curve.points.push_back({tau, *fpr, *tpr});
    }
    return curve;
}

// PR points (recall = TPR_ID, precision).
inline Curve pr_curve(const EvalPixels& px, const std::vector<double>& grid) {
    if (grid.empty()) throw std::invalid_argument("pr_curve: empty grid");
    Curve curve;
    curve.kind = CurveKind::Pr;
    curve.grid = grid;
    for (double tau : grid) {
        const OodConfusion conf = confusion_at(px, tau);
        const auto rec = tpr_id(conf);
        const auto prec = precision_id(conf);
        if (rec && prec) curve.points.push_back({tau, *rec, *prec});
    }
    return curve;
}

// Trapezoidal integration over x after sorting by x. ROC prepends (0,0)
// and extends to x = 1 at constant y (the tau = 0 operating point); PR
// extends precision to recall 0 at constant value and integrates up to the
// maximum attained recall.
inline double area_under(const Curve& curve) {
    if (curve.points.empty()) return 0.0;
    std::vector<std::pair<double, double>> pts;
    pts.reserve(curve.points.size() + 2);
    for (const auto& p : curve.points) pts.emplace_back(p.x, p.y);
    std::sort(pts.begin(), pts.end());

    if (curve.kind == CurveKind::Roc) {
        if (pts.front().first > 0.0) pts.insert(pts.begin(), {0.0, 0.0});
        if (pts.back().first < 1.0) pts.emplace_back(1.0, pts.back().second);
    } else {
        if (pts.front().first > 0.0) pts.insert(pts.begin(), {0.0, pts.front().second});
    }

    double area = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i)
        area += 0.5 * (pts[i].second + pts[i - 1].second) * (pts[i].first - pts[i - 1].first);
    return area;
}

// ---------------------------------------------------------------------------
// One-vs-rest metrics (all-classes runs, no annotated outliers required).

struct OvrClassMetrics {
    std::optional<double> tpr, tnr, bacc, f1;
};

struct OvrMetrics {
    std::vector<OvrClassMetrics> per_class;  // index 0 = class 1
    std::optional<double> mean_tpr, mean_tnr, mean_bacc, mean_f1;
};

namespace detail {

struct OvrCounts {
    long long tp = 0, fn = 0, fp = 0, tn = 0;
};

// FP_c counts only ID pixels (FP_c = FP_c^ID); TN_c counts both ID pixels
// of other classes and annotated outliers predicted not-c.  With
// discard_rejected, pixels sent to the outlier class are left out of the
// tallies entirely: false negatives that merely moved to the reject class
// should not count against the ID classes.
inline OvrCounts ovr_counts(const EvalPixels& px, int cls, double tau,
                            bool discard_rejected = false) {
    OvrCounts k;
    for (std::size_t p = 0; p < px.size(); ++p) {
        const int pred = predict_pixel(px.row(p), px.num_classes, tau);
        if (discard_rejected && pred == 0) continue;
        const int y = px.actual[p];
        if (y == cls) {
            pred == cls ? ++k.tp : ++k.fn;
        } else if (pred == cls) {
            if (y != 0) ++k.fp;
        } else {
            ++k.tn;
        }
    }
    return k;
}

inline std::optional<double> mean_defined(const std::vector<std::optional<double>>& vals) {
    double sum = 0.0;
    int n = 0;
    for (const auto& v : vals)
        if (v) {
            sum += *v;
            ++n;
        }
    if (n == 0) return std::nullopt;
    return sum / n;
}

}  // namespace detail

inline OvrMetrics ovr_metrics(const EvalPixels& px, double tau, bool discard_rejected = false) {
    OvrMetrics out;
    std::vector<std::optional<double>> tprs, tnrs, baccs, f1s;
    for (int c = 1; c <= px.num_classes; ++c) {
        const auto k = detail::ovr_counts(px, c, tau, discard_rejected);
        OvrClassMetrics m;
        if (k.tp + k.fn > 0) m.tpr = static_cast<double>(k.tp) / (k.tp + k.fn);
        if (k.tn + k.fp > 0) m.tnr = static_cast<double>(k.tn) / (k.tn + k.fp);
        if (m.tpr && m.tnr) m.bacc = 0.5 * (*m.tpr + *m.tnr);
        if (2 * k.tp + k.fp + k.fn > 0 && k.tp + k.fn > 0)
            m.f1 = static_cast<double>(2 * k.tp) / (2 * k.tp + k.fp + k.fn);
        // A class absent from the labels contributes nothing to the means.
        if (k.tp + k.fn == 0) m = OvrClassMetrics{};
        tprs.push_back(m.tpr);
        tnrs.push_back(m.tnr);
        baccs.push_back(m.bacc);
        f1s.push_back(m.f1);
        out.per_class.push_back(m);
    }
    out.mean_tpr = detail::mean_defined(tprs);
    out.mean_tnr = detail::mean_defined(tnrs);
    out.mean_bacc = detail::mean_defined(baccs);
    out.mean_f1 = detail::mean_defined(f1s);
    return out;
}

struct OvrAreas {
    std::optional<double> auroc, aupr;  // means over classes present in the labels
    std::vector<std::optional<double>> auroc_per_class, aupr_per_class;
};

inline OvrAreas ovr_curves(const EvalPixels& px, const std::vector<double>& grid) {
    if (grid.empty()) throw std::invalid_argument("ovr_curves: empty grid");
    OvrAreas out;
    for (int c = 1; c <= px.num_classes; ++c) {
        Curve roc, pr;
        roc.kind = CurveKind::Roc;
        pr.kind = CurveKind::Pr;
        bool class_present = false;
        for (double tau : grid) {
            const auto k = detail::ovr_counts(px, c, tau);
            if (k.tp + k.fn == 0) break;  // class absent at every tau
            class_present = true;
            const double tpr = static_cast<double>(k.tp) / (k.tp + k.fn);
            if (k.tn + k.fp > 0)
                roc.points.push_back({tau, 1.0 - static_cast<double>(k.tn) / (k.tn + k.fp), tpr});
            if (k.tp + k.fp > 0)
                pr.points.push_back({tau, tpr, static_cast<double>(k.tp) / (k.tp + k.fp)});
        }
        out.auroc_per_class.push_back(
            class_present && !roc.points.empty() ? std::optional<double>(area_under(roc)) : std::nullopt);
        out.aupr_per_class.push_back(
            class_present && !pr.points.empty() ? std::optional<double>(area_under(pr)) : std::nullopt);
    }
    out.auroc = detail::mean_defined(out.auroc_per_class);
    out.aupr = detail::mean_defined(out.aupr_per_class);
    return out;
}

// ---------------------------------------------------------------------------
// CSV serialization.

inline std::string curve_to_csv(const Curve& curve) {
    std::ostringstream os;
    os.precision(17);
    os << "tau," << (curve.kind == CurveKind::Roc ? "fpr_ood,tpr_id" : "recall,precision") << "\n";
    for (const auto& p : curve.points) os << p.tau << "," << p.x << "," << p.y << "\n";
    return os.str();
}

inline std::string confusion_to_csv(const OodConfusion& conf) {
    std::ostringstream os;
    os << "actual\\predicted";
    for (int p = 0; p <= conf.num_classes; ++p) os << "," << p;
    os << "\n";
    for (int a = 0; a <= conf.num_classes; ++a) {
        os << a;
        for (int p = 0; p <= conf.num_classes; ++p) os << "," << conf.at(a, p);
        os << "\n";
    }
    return os.str();
}

}  // namespace oodseg
