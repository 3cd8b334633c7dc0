#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "oodseg/rng.hpp"
#include "oodseg/tensor.hpp"

// Two-level cross-validation: subject partitions (SP) x class partitions
// (CP). Fold (i,k) tests on subject group i with class group k held out
// of training and treated as the aggregated outlier class at evaluation.

namespace oodseg {

struct PartitionConfig {
    int n_sp = 4;
    int n_cp = 4;
    std::uint64_t seed = 0;
};

struct Fold {
    int sp = 0;
    int cp = 0;
    std::vector<int> train_subjects;
    std::vector<int> test_subjects;
    std::vector<int> id_classes;       // ascending original ids
    std::set<int> heldout_classes;
    std::map<int, int> renumber;       // original id -> contiguous 1..C'
};

namespace detail {

// Seeded shuffle, then round-robin assignment into near-equal groups.
inline std::vector<std::vector<int>> partition_round_robin(std::vector<int> items, int n_groups,
                                                           std::uint64_t seed) {
    Rng rng(seed);
    rng.shuffle(items);
    std::vector<std::vector<int>> groups(n_groups);
    for (std::size_t i = 0; i < items.size(); ++i)
        groups[i % n_groups].push_back(items[i]);
    return groups;
}

}  // namespace detail

inline std::vector<Fold> make_folds(const std::vector<int>& subjects, const std::vector<int>& classes,
                                    const PartitionConfig& cfg) {
    if (cfg.n_sp < 1 || cfg.n_sp > static_cast<int>(subjects.size()))
        throw std::invalid_argument("make_folds: n_sp out of range");
    if (cfg.n_cp < 1 || cfg.n_cp > static_cast<int>(classes.size()))
        throw std::invalid_argument("make_folds: n_cp out of range");

    const auto sp_groups =
        detail::partition_round_robin(subjects, cfg.n_sp, mix_seed(cfg.seed, {0x5350ull}));
    const auto cp_groups =
        detail::partition_round_robin(classes, cfg.n_cp, mix_seed(cfg.seed, {0x4350ull}));

    std::vector<Fold> folds;
    folds.reserve(static_cast<std::size_t>(cfg.n_sp) * cfg.n_cp);
    for (int i = 0; i < cfg.n_sp; ++i) {
        for (int k = 0; k < cfg.n_cp; ++k) {
            Fold f;
            f.sp = i;
            f.cp = k;
            f.test_subjects = sp_groups[i];
            for (int g = 0; g < cfg.n_sp; ++g)
                if (g != i)
                    f.train_subjects.insert(f.train_subjects.end(), sp_groups[g].begin(),
                                            sp_groups[g].end());
            std::sort(f.train_subjects.begin(), f.train_subjects.end());
            std::sort(f.test_subjects.begin(), f.test_subjects.end());

            if (cfg.n_cp > 1)
                f.heldout_classes.insert(cp_groups[k].begin(), cp_groups[k].end());
            for (int c : classes)
                if (!f.heldout_classes.count(c)) f.id_classes.push_back(c);
            std::sort(f.id_classes.begin(), f.id_classes.end());
            int next = 1;
            for (int c : f.id_classes) f.renumber[c] = next++;
            folds.push_back(std::move(f));
        }
    }
    return folds;
}

enum class Phase { Train, Test };

struct RelabelResult {
    SparseAnnotation annotation;        // ID classes renumbered 1..C'
    std::vector<std::uint8_t> outlier;  // test phase: 1 where the pixel is an annotated outlier
};

inline RelabelResult relabel_for_fold(const SparseAnnotation& ann, const Fold& fold, Phase phase) {
    RelabelResult out;
    out.annotation.height = ann.height;
    out.annotation.width = ann.width;
    out.annotation.num_classes = static_cast<int>(fold.id_classes.size());
    out.annotation.labels.assign(ann.labels.size(), 0);
    out.outlier.assign(ann.labels.size(), 0);

    for (std::size_t p = 0; p < ann.labels.size(); ++p) {
        const int lbl = ann.labels[p];
        if (lbl == 0) continue;
        const auto it = fold.renumber.find(lbl);
        if (it != fold.renumber.end()) {
            out.annotation.labels[p] = it->second;
        } else if (fold.heldout_classes.count(lbl)) {
            if (phase == Phase::Test) out.outlier[p] = 1;
            // train phase: held-out pixels become unlabelled
        } else {
            throw std::invalid_argument("relabel_for_fold: unknown label id " + std::to_string(lbl));
        }
    }
    return out;
}

// Human-readable fold roster for reproducibility audits.
inline std::string fold_roster_text(const std::vector<Fold>& folds) {
    std::ostringstream os;
    for (const auto& f : folds) {
        os << "fold sp=" << f.sp << " cp=" << f.cp << "\n  train_subjects:";
        for (int s : f.train_subjects) os << " " << s;
        os << "\n  test_subjects:";
        for (int s : f.test_subjects) os << " " << s;
        os << "\n  id_classes:";
        for (int c : f.id_classes) os << " " << c;
        os << "\n  heldout_classes:";
        for (int c : f.heldout_classes) os << " " << c;
        os << "\n";
    }
    return os.str();
}

}  // namespace oodseg
