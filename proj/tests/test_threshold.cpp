#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oodseg/rng.hpp"
#include "oodseg/threshold.hpp"

using namespace oodseg;

namespace {

// Random fold table: non-increasing TPR, non-decreasing TNR, some folds
// without any OOD term.
FoldTable random_table(std::size_t grid_size, Rng& rng, bool with_ood) {
    FoldTable f;
    double tpr = 1.0, tnr = 0.0;
    for (std::size_t t = 0; t < grid_size; ++t) {
        f.tpr_id.push_back(tpr);
        f.tnr_ood.push_back(with_ood ? std::optional<double>(tnr) : std::nullopt);
        tpr = std::max(0.0, tpr - rng.uniform(0.0, 2.5 / grid_size));
        tnr = std::min(1.0, tnr + rng.uniform(0.0, 2.5 / grid_size));
    }
    return f;
}

// Exhaustive reference scan, written as straight loops.
double ref_select(const std::vector<FoldTable>& folds, const std::vector<double>& grid,
                  double w_id, double w_ood) {
    double best_val = -1.0;
    double best_tau = 0.0;
    for (std::size_t t = 0; t < grid.size(); ++t) {
        double sum = 0.0;
        for (const auto& f : folds) {
            if (!f.tnr_ood.empty() && f.tnr_ood[t].has_value() && w_ood > 0.0)
                sum += w_id * f.tpr_id[t] + w_ood * *f.tnr_ood[t];
            else
                sum += f.tpr_id[t];
        }
        sum /= folds.size();
        if (sum > best_val) {
            best_val = sum;
            best_tau = grid[t];
        }
    }
    return best_tau;
}

}  // namespace

TEST_CASE("uniform grid") {
    const auto g = uniform_grid();
    REQUIRE(g.size() == 1001);
    CHECK(g.front() == 0.0);
    CHECK(g.back() == 1.0);
    CHECK(g[500] == doctest::Approx(0.5));
}

TEST_CASE("linear cancellation ties break to the smallest tau") {
    const std::vector<double> grid{0.0, 0.25, 0.5, 0.75, 1.0};
    FoldTable f;
    for (double tau : grid) {
        f.tpr_id.push_back(1.0 - tau);
        f.tnr_ood.push_back(tau);
    }
    ThresholdConfig cfg;
    cfg.grid = grid;
    const ThresholdResult r = select_threshold({f}, cfg);
    for (double v : r.objective) CHECK(v == doctest::Approx(0.5));
    CHECK(r.tau_m == 0.0);
}

TEST_CASE("plateau on a separated fold") {
    // ID max-scores at 0.9, outliers at 0.1: every tau in (0.1, 0.9) is
    // perfect, so the argmax lands on the smallest such grid point
    const std::vector<double> grid{0.0, 0.1, 0.2, 0.5, 0.8, 0.9, 1.0};
    FoldTable f;
    for (double tau : grid) {
        f.tpr_id.push_back(tau < 0.9 ? 1.0 : 0.0);
        f.tnr_ood.push_back(tau >= 0.1 ? 1.0 : 0.0);
    }
    ThresholdConfig cfg;
    cfg.grid = grid;
    const ThresholdResult r = select_threshold({f}, cfg);
    CHECK(r.tau_m == 0.1);
}

TEST_CASE("matches the exhaustive scan on random instances") {
    Rng rng(21);
    const auto grid = uniform_grid(101);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<FoldTable> folds;
        const int n = 1 + trial % 4;
        for (int k = 0; k < n; ++k) folds.push_back(random_table(grid.size(), rng, rng.uniform() < 0.8));
        ThresholdConfig cfg;
        cfg.grid = grid;
        cfg.w_id = rng.uniform(0.1, 0.9);
        cfg.w_ood = 1.0 - cfg.w_id;
        const ThresholdResult r = select_threshold(folds, cfg);
        CHECK(r.tau_m == ref_select(folds, grid, cfg.w_id, cfg.w_ood));
    }
}

TEST_CASE("id-only mode maximizes mean TPR alone") {
    Rng rng(22);
    const auto grid = uniform_grid(101);
    std::vector<FoldTable> folds;
    for (int k = 0; k < 3; ++k) folds.push_back(random_table(grid.size(), rng, true));
    ThresholdConfig cfg;
    cfg.grid = grid;
    cfg.mode = ThresholdMode::IdOnly;
    const ThresholdResult r = select_threshold(folds, cfg);

    double best = -1.0, best_tau = 0.0;
    for (std::size_t t = 0; t < grid.size(); ++t) {
        double mean = 0.0;
        for (const auto& f : folds) mean += f.tpr_id[t];
        mean /= folds.size();
        if (mean > best) {
            best = mean;
            best_tau = grid[t];
        }
    }
    CHECK(r.tau_m == best_tau);
    CHECK(r.objective.front() == doctest::Approx(1.0));  // TPR starts at 1
}

TEST_CASE("folds without OOD terms contribute only the renormalized ID term") {
    const std::vector<double> grid{0.0, 0.5, 1.0};
    FoldTable with;
    with.tpr_id = {1.0, 0.8, 0.0};
    with.tnr_ood = {std::optional<double>(0.0), std::optional<double>(1.0),
                    std::optional<double>(1.0)};
    FoldTable without;
    without.tpr_id = {1.0, 0.4, 0.0};
    without.tnr_ood = {std::nullopt, std::nullopt, std::nullopt};
    ThresholdConfig cfg;
    cfg.grid = grid;
    const ThresholdResult r = select_threshold({with, without}, cfg);
    // objective(0.5) = (0.5*0.8 + 0.5*1.0 + 0.4) / 2
    CHECK(r.objective[1] == doctest::Approx((0.9 + 0.4) / 2));
    CHECK(r.objective[0] == doctest::Approx((0.5 + 1.0) / 2));
}

TEST_CASE("result invariant to fold order") {
    Rng rng(23);
    const auto grid = uniform_grid(51);
    std::vector<FoldTable> folds;
    for (int k = 0; k < 4; ++k) folds.push_back(random_table(grid.size(), rng, true));
    ThresholdConfig cfg;
    cfg.grid = grid;
    const double tau_a = select_threshold(folds, cfg).tau_m;
    std::reverse(folds.begin(), folds.end());
    CHECK(select_threshold(folds, cfg).tau_m == tau_a);
}

TEST_CASE("argmax property holds at the endpoints") {
    Rng rng(24);
    const auto grid = uniform_grid(101);
    std::vector<FoldTable> folds{random_table(grid.size(), rng, true)};
    ThresholdConfig cfg;
    cfg.grid = grid;
    const ThresholdResult r = select_threshold(folds, cfg);
    std::size_t best = 0;
    for (std::size_t t = 0; t < grid.size(); ++t)
        if (r.objective[t] > r.objective[best]) best = t;
    CHECK(r.objective[best] >= r.objective.front());
    CHECK(r.objective[best] >= r.objective.back());
    CHECK(r.tau_m == grid[best]);
}

TEST_CASE("input validation") {
    ThresholdConfig cfg;
    CHECK_THROWS_AS(select_threshold({FoldTable{}}, cfg), std::invalid_argument);
    cfg.grid = uniform_grid(11);
    CHECK_THROWS_AS(select_threshold({}, cfg), std::invalid_argument);
    FoldTable short_table;
    short_table.tpr_id.assign(5, 1.0);
    CHECK_THROWS_AS(select_threshold({short_table}, cfg), std::invalid_argument);
}
