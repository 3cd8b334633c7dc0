#pragma once

#include <optional>
#include <stdexcept>
#include <vector>

// Operating-threshold selection across the two-level folds: tau_m is the
// grid argmax of the fold-averaged weighted sum of TPR_ID and TNR_OOD.

namespace oodseg {

enum class ThresholdMode { TwoLevel, IdOnly };

struct ThresholdConfig {
    double w_id = 0.5;
    double w_ood = 0.5;
    std::vector<double> grid;  // sorted, subset of [0,1]
    ThresholdMode mode = ThresholdMode::TwoLevel;
};

// One fold's threshold-sensitive metrics sampled on the common grid.
// tnr_ood entries are absent when the fold has no annotated outliers.
struct FoldTable {
    std::vector<double> tpr_id;
    std::vector<std::optional<double>> tnr_ood;
};

struct ThresholdResult {
    double tau_m = 0.0;
    std::vector<double> objective;  // objective value per grid point
};

// 1001 evenly spaced points in [0,1].
inline std::vector<double> uniform_grid(int points = 1001) {
    std::vector<double> g(points);
    for (int i = 0; i < points; ++i) g[i] = static_cast<double>(i) / (points - 1);
    return g;
}

inline ThresholdResult select_threshold(const std::vector<FoldTable>& folds,
                                        const ThresholdConfig& cfg) {
    if (cfg.grid.empty()) throw std::invalid_argument("select_threshold: empty grid");
    if (folds.empty()) throw std::invalid_argument("select_threshold: empty fold list");
    const double w_id = cfg.mode == ThresholdMode::IdOnly ? 1.0 : cfg.w_id;
    const double w_ood = cfg.mode == ThresholdMode::IdOnly ? 0.0 : cfg.w_ood;

    ThresholdResult res;
    res.objective.resize(cfg.grid.size());
    for (const auto& f : folds)
        if (f.tpr_id.size() != cfg.grid.size() ||
            (!f.tnr_ood.empty() && f.tnr_ood.size() != cfg.grid.size()))
            throw std::invalid_argument("select_threshold: fold table does not cover the grid");

    for (std::size_t t = 0; t < cfg.grid.size(); ++t) {
        double sum = 0.0;
        for (const auto& f : folds) {
            const bool has_ood = !f.tnr_ood.empty() && f.tnr_ood[t].has_value();
            if (has_ood && w_ood > 0.0) {
                sum += w_id * f.tpr_id[t] + w_ood * *f.tnr_ood[t];
            } else {
                // Absent OOD term: the fold contributes only its defined
                // term with the weights renormalized.
                sum += f.tpr_id[t];
            }
        }
        res.objective[t] = sum / static_cast<double>(folds.size());
    }

    std::size_t best = 0;
    for (std::size_t t = 1; t < cfg.grid.size(); ++t)
        if (res.objective[t] > res.objective[best]) best = t;  // ties keep the smallest tau
    res.tau_m = cfg.grid[best];
    return res;
}

}  // namespace oodseg
