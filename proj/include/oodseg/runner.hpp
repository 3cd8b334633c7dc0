#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "oodseg/folds.hpp"
#include "oodseg/metrics.hpp"
#include "oodseg/nnet.hpp"
#include "oodseg/scoring.hpp"
#include "oodseg/synthdata.hpp"
#include "oodseg/tensor.hpp"
#include "oodseg/threshold.hpp"

// Full-experiment orchestration: data, folds, per-fold training and
// scoring, metric aggregation, threshold selection, report emission.

namespace oodseg {

inline constexpr const char* kVersion = "0.1.0";

struct ScorerSpec {
    enum class Kind { Baseline, Odin, Mahalanobis, Godin };
    Kind kind = Kind::Baseline;
    double temperature = 10.0;    // odin
    double epsilon_scale = 1e-6;  // mahalanobis
    Similarity similarity = Similarity::InnerProduct;  // godin
    int head_context = 1;                              // godin: 1 or 3

    std::string name() const {
        switch (kind) {
            case Kind::Baseline: return "baseline";
            case Kind::Odin: return "odin";
            case Kind::Mahalanobis: return "mahalanobis";
            case Kind::Godin: return "godin";
        }
        throw std::logic_error("ScorerSpec::name");
    }

    static Kind kind_from_name(const std::string& s) {
        if (s == "baseline") return Kind::Baseline;
        if (s == "odin") return Kind::Odin;
        if (s == "mahalanobis") return Kind::Mahalanobis;
        if (s == "godin") return Kind::Godin;
        throw std::invalid_argument("unknown scorer: " + s);
    }
};

struct ExperimentConfig {
    SynthSpec synth;
    std::string dataset_dir;  // when nonempty, load instead of generating
    PartitionConfig partitions;
    TrainConfig train;
    std::vector<int> hidden{32};
    int context = 1;  // classifier patch side
    std::vector<ScorerSpec> scorers;
    double w_id = 0.5;
    double w_ood = 0.5;
    std::map<std::string, double> tau_override;  // per-scorer tau_m reused from another run
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    int jobs = 1;
    bool save_checkpoints = true;

    void validate() const {
        if (scorers.empty()) throw std::invalid_argument("config: at least one scorer required");
        if (std::abs(w_id + w_ood - 1.0) > 1e-12)
            throw std::invalid_argument("config: w_id + w_ood must sum to 1");
        if (jobs < 1) throw std::invalid_argument("config: jobs must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Config (de)serialization. The canonical dump also feeds the provenance
// hash, so field order is fixed by nlohmann's sorted object keys.

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["data"]["synth"] = {{"num_subjects", c.synth.num_subjects},
                          {"images_per_subject", c.synth.images_per_subject},
                          {"height", c.synth.height},
                          {"width", c.synth.width},
                          {"bands", c.synth.bands},
                          {"num_classes", c.synth.num_classes},
                          {"class_mean_separation", c.synth.class_mean_separation},
                          {"signature_overlap", c.synth.signature_overlap},
                          {"signature_overlap_mean", c.synth.signature_overlap_mean},
                          {"mixed_pixel_fraction", c.synth.mixed_pixel_fraction},
                          {"intra_class_noise", c.synth.intra_class_noise},
                          {"subject_shift_scale", c.synth.subject_shift_scale},
                          {"blob_count_min", c.synth.blob_count_min},
                          {"blob_count_max", c.synth.blob_count_max},
                          {"annotation_coverage", c.synth.annotation_coverage},
                          {"seed", c.synth.seed}};
    if (!c.dataset_dir.empty()) j["data"]["dataset_dir"] = c.dataset_dir;
    j["partitions"] = {{"n_sp", c.partitions.n_sp}, {"n_cp", c.partitions.n_cp}};
    j["train"] = {{"lr", c.train.lr},         {"batch_size", c.train.batch_size},
                  {"epochs", c.train.epochs}, {"beta1", c.train.beta1},
                  {"beta2", c.train.beta2},   {"eps", c.train.eps},
                  {"gamma", c.train.gamma}};
    j["model"] = {{"hidden", c.hidden}, {"context", c.context}};
    j["scorers"] = nlohmann::json::array();
    for (const auto& s : c.scorers) {
        nlohmann::json sj{{"kind", s.name()}};
        if (s.kind == ScorerSpec::Kind::Odin) sj["temperature"] = s.temperature;
        if (s.kind == ScorerSpec::Kind::Mahalanobis) sj["epsilon_scale"] = s.epsilon_scale;
        if (s.kind == ScorerSpec::Kind::Godin) {
            sj["similarity"] = similarity_name(s.similarity);
            sj["context"] = s.head_context;
        }
        j["scorers"].push_back(sj);
    }
    j["threshold"] = {{"w_id", c.w_id}, {"w_ood", c.w_ood}};
    if (!c.tau_override.empty()) j["threshold"]["tau_m"] = c.tau_override;
    j["seed"] = c.seed;
    return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    if (j.contains("data")) {
        const auto& d = j["data"];
        if (d.contains("synth")) {
            const auto& s = d["synth"];
            auto get = [&](const char* k, auto& dst) {
                if (s.contains(k)) dst = s[k].template get<std::decay_t<decltype(dst)>>();
            };
            get("num_subjects", c.synth.num_subjects);
            get("images_per_subject", c.synth.images_per_subject);
            get("height", c.synth.height);
            get("width", c.synth.width);
            get("bands", c.synth.bands);
            get("num_classes", c.synth.num_classes);
            get("class_mean_separation", c.synth.class_mean_separation);
            get("signature_overlap", c.synth.signature_overlap);
            get("signature_overlap_mean", c.synth.signature_overlap_mean);
            get("mixed_pixel_fraction", c.synth.mixed_pixel_fraction);
            get("intra_class_noise", c.synth.intra_class_noise);
            get("subject_shift_scale", c.synth.subject_shift_scale);
            get("blob_count_min", c.synth.blob_count_min);
            get("blob_count_max", c.synth.blob_count_max);
            get("annotation_coverage", c.synth.annotation_coverage);
            get("seed", c.synth.seed);
        }
        if (d.contains("dataset_dir")) c.dataset_dir = d["dataset_dir"].get<std::string>();
    }
    if (j.contains("partitions")) {
        c.partitions.n_sp = j["partitions"].value("n_sp", 4);
        c.partitions.n_cp = j["partitions"].value("n_cp", 4);
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        c.train.lr = t.value("lr", c.train.lr);
        c.train.batch_size = t.value("batch_size", c.train.batch_size);
        c.train.epochs = t.value("epochs", c.train.epochs);
        c.train.beta1 = t.value("beta1", c.train.beta1);
        c.train.beta2 = t.value("beta2", c.train.beta2);
        c.train.eps = t.value("eps", c.train.eps);
        c.train.gamma = t.value("gamma", c.train.gamma);
    }
    if (j.contains("model")) {
        c.hidden = j["model"].value("hidden", c.hidden);
        c.context = j["model"].value("context", c.context);
    }
    if (j.contains("scorers")) {
        c.scorers.clear();
        for (const auto& sj : j["scorers"]) {
            ScorerSpec s;
            s.kind = ScorerSpec::kind_from_name(sj.at("kind").get<std::string>());
            s.temperature = sj.value("temperature", s.temperature);
            s.epsilon_scale = sj.value("epsilon_scale", s.epsilon_scale);
            if (sj.contains("similarity"))
                s.similarity = similarity_from_name(sj["similarity"].get<std::string>());
            s.head_context = sj.value("context", s.head_context);
            c.scorers.push_back(s);
        }
    }
    if (j.contains("threshold")) {
        c.w_id = j["threshold"].value("w_id", c.w_id);
        c.w_ood = j["threshold"].value("w_ood", c.w_ood);
        if (j["threshold"].contains("tau_m")) {
            const auto& t = j["threshold"]["tau_m"];
            if (t.is_object()) {
                for (const auto& [k, v] : t.items()) c.tau_override[k] = v.get<double>();
            } else {
                c.tau_override["*"] = t.get<double>();
            }
        }
    }
    c.seed = j.value("seed", c.seed);
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config " + path);
    return config_from_json(nlohmann::json::parse(f));
}

// ---------------------------------------------------------------------------
// Per-pixel patch gathering for the classifier input (zero-padded borders).

inline void gather_patch(const SpectralImage& img, int i, int j, int context, double* out) {
    const int half = context / 2;
    const int B = img.bands;
    int q = 0;
    for (int di = -half; di <= half; ++di) {
        for (int dj = -half; dj <= half; ++dj, ++q) {
            const int ni = i + di, nj = j + dj;
            double* dst = out + static_cast<std::size_t>(q) * B;
            if (ni < 0 || ni >= img.height || nj < 0 || nj >= img.width) {
                std::fill_n(dst, B, 0.0);
            } else {
                const double* src = img.data.data() + flat_index(ni, nj, 0, img.width, B);
                std::copy_n(src, B, dst);
            }
        }
    }
}

// Runs the classifier over every pixel of an image.
inline std::pair<LogitVolume, FeatureVolume> infer_volumes(const MlpClassifier& model,
                                                           const SpectralImage& img) {
    const int in_dim = model.input_dim();
    if (in_dim != img.bands * model.context * model.context)
        throw std::invalid_argument("infer_volumes: image bands do not match checkpoint");
    Matrix x(img.height * img.width, in_dim);
    for (int i = 0; i < img.height; ++i)
        for (int j = 0; j < img.width; ++j)
            gather_patch(img, i, j, model.context, x.row(i * img.width + j));
    ForwardResult fr = forward(model, x);

    LogitVolume logits;
    logits.height = img.height;
    logits.width = img.width;
    logits.num_classes = fr.logits.cols;
    logits.data = std::move(fr.logits.v);
    FeatureVolume feats;
    feats.height = img.height;
    feats.width = img.width;
    feats.dim = fr.features.cols;
    feats.data = std::move(fr.features.v);
    return {std::move(logits), std::move(feats)};
}

// ---------------------------------------------------------------------------
// Fold execution.

namespace detail {

struct FoldOutcome {
    int sp = 0, cp = 0;
    std::map<std::string, std::optional<double>> auroc, aupr;
    std::map<std::string, Curve> roc, pr;
    std::map<std::string, FoldTable> tables;  // sampled on the shared 1001 grid
    std::map<std::string, std::vector<double>> precision_table;  // same grid, -1 = absent
    std::map<std::string, EvalPixels> pixels;
};

inline TrainSet build_train_set(const std::vector<const SpectralImage*>& images,
                                const std::vector<SparseAnnotation>& anns, int context,
                                int neighbors_context) {
    TrainSet ts;
    const int B = images.front()->bands;
    const int in_dim = B * context * context;
    const int K = neighbors_context * neighbors_context;
    ts.neighbors = K;

    std::size_t count = 0;
    for (const auto& a : anns)
        for (int v : a.labels)
            if (v > 0) ++count;
    ts.inputs = Matrix(static_cast<int>(count) * K, in_dim);
    if (K > 1) ts.present.resize(count * K);
    ts.labels.reserve(count);

    const int half = neighbors_context / 2;
    std::size_t s = 0;
    for (std::size_t m = 0; m < images.size(); ++m) {
        const SpectralImage& img = *images[m];
        const SparseAnnotation& ann = anns[m];
        for (int i = 0; i < img.height; ++i) {
            for (int j = 0; j < img.width; ++j) {
                const int y = ann.at(i, j);
                if (y == 0) continue;
                int q = 0;
                for (int di = -half; di <= half; ++di) {
                    for (int dj = -half; dj <= half; ++dj, ++q) {
                        const int ni = i + di, nj = j + dj;
                        const bool inside =
                            ni >= 0 && ni < img.height && nj >= 0 && nj < img.width;
                        if (inside) gather_patch(img, ni, nj, context, ts.inputs.row(s * K + q));
                        if (K > 1) ts.present[s * K + q] = inside ? 1 : 0;
                    }
                }
                ts.labels.push_back(y);
                ++s;
            }
        }
    }
    return ts;
}

inline bool roster_needs_baseline(const std::vector<ScorerSpec>& scorers) {
    for (const auto& s : scorers)
        if (s.kind != ScorerSpec::Kind::Godin) return true;
    return false;
}

inline const ScorerSpec* find_godin(const std::vector<ScorerSpec>& scorers) {
    for (const auto& s : scorers)
        if (s.kind == ScorerSpec::Kind::Godin) return &s;
    return nullptr;
}

}  // namespace detail

// Executes one fold: train, score every test image with every configured
// scorer, compute curves and the threshold tables.
inline detail::FoldOutcome run_fold(const ExperimentConfig& cfg, const SynthDataset& ds,
                                    const Fold& fold, const std::vector<double>& shared_grid,
                                    const std::string& checkpoint_dir = "") {
    detail::FoldOutcome out;
    out.sp = fold.sp;
    out.cp = fold.cp;
    const std::uint64_t sub_seed = mix_seed(cfg.seed, {static_cast<std::uint64_t>(fold.sp),
                                                       static_cast<std::uint64_t>(fold.cp)});
    const int id_count = static_cast<int>(fold.id_classes.size());
    const int bands = ds.images.front().bands;

    std::set<int> train_subjects(fold.train_subjects.begin(), fold.train_subjects.end());
    std::set<int> test_subjects(fold.test_subjects.begin(), fold.test_subjects.end());

    std::vector<const SpectralImage*> train_images;
    std::vector<SparseAnnotation> train_anns;
    for (std::size_t m = 0; m < ds.images.size(); ++m)
        if (train_subjects.count(ds.subject_of[m])) {
            train_images.push_back(&ds.images[m]);
            train_anns.push_back(relabel_for_fold(ds.annotations[m], fold, Phase::Train).annotation);
        }

    TrainConfig tc = cfg.train;
    tc.seed = sub_seed;

    std::optional<MlpClassifier> baseline_model;
    if (detail::roster_needs_baseline(cfg.scorers)) {
        baseline_model = make_mlp(bands, cfg.context, cfg.hidden, id_count, sub_seed);
        TrainSet ts = detail::build_train_set(train_images, train_anns, cfg.context, 1);
        fit(*baseline_model, nullptr, ts, tc);
    }

    std::optional<MlpClassifier> godin_model;
    std::optional<GodinHead> godin_head;
    if (const ScorerSpec* gs = detail::find_godin(cfg.scorers)) {
        const std::uint64_t gseed = mix_seed(sub_seed, {0x47ull});
        godin_model = make_mlp(bands, cfg.context, cfg.hidden, id_count, gseed);
        godin_head = make_godin_head(gs->similarity, godin_model->feature_dim(), id_count,
                                     gs->head_context, gseed);
        TrainSet ts = detail::build_train_set(train_images, train_anns, cfg.context, gs->head_context);
        TrainConfig gtc = tc;
        gtc.seed = gseed;
        fit(*godin_model, &*godin_head, ts, gtc);
    }

    std::optional<GaussianStats> maha_stats;
    for (const auto& sc : cfg.scorers) {
        if (sc.kind != ScorerSpec::Kind::Mahalanobis) continue;
        GaussianAccumulator acc(id_count, baseline_model->feature_dim());
        for (std::size_t m = 0; m < train_images.size(); ++m) {
            auto [logits, feats] = infer_volumes(*baseline_model, *train_images[m]);
            acc.add(feats, train_anns[m]);
        }
        maha_stats = acc.finalize(sc.epsilon_scale);
    }

    if (!checkpoint_dir.empty()) {
        namespace fs = std::filesystem;
        if (baseline_model) {
            fs::create_directories(checkpoint_dir);
            save_model(checkpoint_dir, *baseline_model, nullptr);
            if (maha_stats) save_gaussian_stats(checkpoint_dir + "/stats", *maha_stats);
        }
        if (godin_model) {
            const std::string gdir = checkpoint_dir + "_godin";
            fs::create_directories(gdir);
            save_model(gdir, *godin_model, &*godin_head);
        }
    }

    // Score test images, pooling evaluated pixels per scorer.
    for (std::size_t m = 0; m < ds.images.size(); ++m) {
        if (!test_subjects.count(ds.subject_of[m])) continue;
        const RelabelResult rel = relabel_for_fold(ds.annotations[m], fold, Phase::Test);
        std::optional<LogitVolume> logits;
        std::optional<FeatureVolume> feats;
        if (baseline_model) {
            auto [lv, fv] = infer_volumes(*baseline_model, ds.images[m]);
            logits = std::move(lv);
            feats = std::move(fv);
        }
        for (const auto& sc : cfg.scorers) {
            ScoreVolume sv;
            switch (sc.kind) {
                case ScorerSpec::Kind::Baseline: sv = score_baseline(*logits); break;
                case ScorerSpec::Kind::Odin: sv = score_odin(*logits, sc.temperature); break;
                case ScorerSpec::Kind::Mahalanobis: sv = score_mahalanobis(*feats, *maha_stats); break;
                case ScorerSpec::Kind::Godin: {
                    auto [glv, gfv] = infer_volumes(*godin_model, ds.images[m]);
                    sv = score_godin(*godin_head, gfv);
                    break;
                }
            }
            out.pixels[sc.name()].add_volume(sv, rel.annotation, rel.outlier);
        }
    }

    // Exact curves on the per-fold default grid, plus the shared-grid
    // tables used for threshold selection and the curve bands.
    for (const auto& sc : cfg.scorers) {
        const std::string name = sc.name();
        EvalPixels& px = out.pixels[name];
        px.num_classes = id_count;
        const std::vector<double> grid = default_grid(px);
        Curve roc = roc_curve(px, grid);
        Curve pr = pr_curve(px, grid);
        out.auroc[name] = roc.points.empty() ? std::nullopt : std::optional<double>(area_under(roc));
        out.aupr[name] = pr.points.empty() ? std::nullopt : std::optional<double>(area_under(pr));
        out.roc[name] = std::move(roc);
        out.pr[name] = std::move(pr);

        FoldTable table;
        std::vector<double> prec_table;
        for (double tau : shared_grid) {
            const OodConfusion conf = confusion_at(px, tau);
            table.tpr_id.push_back(tpr_id(conf).value_or(0.0));
            table.tnr_ood.push_back(
                fpr_ood(conf) ? std::optional<double>(1.0 - *fpr_ood(conf)) : std::nullopt);
            prec_table.push_back(precision_id(conf).value_or(-1.0));
        }
        out.tables[name] = std::move(table);
        out.precision_table[name] = std::move(prec_table);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Aggregation helpers.

namespace detail {

struct MeanStd {
    double mean = 0.0;
    double stddev = 0.0;
    int n = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
    MeanStd ms;
    ms.n = static_cast<int>(v.size());
    if (v.empty()) return ms;
    for (double x : v) ms.mean += x;
    ms.mean /= v.size();
    for (double x : v) ms.stddev += (x - ms.mean) * (x - ms.mean);
    ms.stddev = std::sqrt(ms.stddev / v.size());
    return ms;
}

inline nlohmann::json ms_json(const MeanStd& ms) {
    if (ms.n == 0) return nullptr;
    return nlohmann::json{{"mean", ms.mean}, {"std", ms.stddev}, {"n", ms.n}};
}

// SVG polyline plot on the unit square, one mean series per scorer with a
// shaded band of +/- one standard deviation across folds.
inline std::string curves_svg(const std::string& title, const std::string& xlabel,
                              const std::string& ylabel,
                              const std::vector<std::pair<std::string,
                                                          std::vector<std::vector<std::pair<double, double>>>>>&
                                  series_by_scorer) {
    const int W = 560, H = 560, M = 60;
    const auto px = [&](double x) { return M + x * (W - 2 * M); };
    const auto py = [&](double y) { return H - M - y * (H - 2 * M); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

    std::ostringstream os;
    os.precision(6);
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    os << "<rect x='" << M << "' y='" << M << "' width='" << W - 2 * M << "' height='" << H - 2 * M
       << "' fill='none' stroke='black'/>\n";
    os << "<text x='" << W / 2 << "' y='24' text-anchor='middle' font-size='16'>" << title
       << "</text>\n";
    os << "<text x='" << W / 2 << "' y='" << H - 16 << "' text-anchor='middle' font-size='12'>"
       << xlabel << "</text>\n";
    os << "<text x='18' y='" << H / 2 << "' text-anchor='middle' font-size='12' transform='rotate(-90 18 "
       << H / 2 << ")'>" << ylabel << "</text>\n";

    int ci = 0;
    int legend_y = M + 16;
    for (const auto& [scorer, fold_curves] : series_by_scorer) {
        if (fold_curves.empty() || fold_curves.front().empty()) continue;
        const std::size_t n_pts = fold_curves.front().size();
        std::vector<double> xs(n_pts), mean(n_pts, 0.0), sd(n_pts, 0.0);
        for (std::size_t p = 0; p < n_pts; ++p) {
            xs[p] = fold_curves.front()[p].first;
            for (const auto& fc : fold_curves) mean[p] += fc[p].second;
            mean[p] /= fold_curves.size();
            for (const auto& fc : fold_curves) sd[p] += (fc[p].second - mean[p]) * (fc[p].second - mean[p]);
            sd[p] = std::sqrt(sd[p] / fold_curves.size());
        }
        const char* color = colors[ci % 5];
        os << "<polygon fill='" << color << "' fill-opacity='0.15' stroke='none' points='";
        for (std::size_t p = 0; p < n_pts; ++p)
            os << px(xs[p]) << "," << py(std::min(1.0, mean[p] + sd[p])) << " ";
        for (std::size_t p = n_pts; p-- > 0;)
            os << px(xs[p]) << "," << py(std::max(0.0, mean[p] - sd[p])) << " ";
        os << "'/>\n";
        os << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5' points='";
        for (std::size_t p = 0; p < n_pts; ++p) os << px(xs[p]) << "," << py(mean[p]) << " ";
        os << "'/>\n";
        os << "<rect x='" << W - M - 130 << "' y='" << legend_y - 10 << "' width='12' height='12' fill='"
           << color << "'/>\n";
        os << "<text x='" << W - M - 112 << "' y='" << legend_y << "' font-size='12'>" << scorer
           << "</text>\n";
        legend_y += 18;
        ++ci;
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// run: the full experiment. Returns the report and writes report.json,
// per-fold curve/confusion CSVs, objective tables, SVG curve plots and
// (optionally) per-fold model checkpoints under cfg.out_dir.

inline nlohmann::json run(const ExperimentConfig& cfg) {
    cfg.validate();
    const SynthDataset ds = cfg.dataset_dir.empty() ? generate(cfg.synth) : load_dataset(cfg.dataset_dir);

    std::vector<int> subjects, classes;
    {
        std::set<int> subj(ds.subject_of.begin(), ds.subject_of.end());
        subjects.assign(subj.begin(), subj.end());
        const int C = ds.annotations.front().num_classes;
        for (int c = 1; c <= C; ++c) classes.push_back(c);
    }
    PartitionConfig pc = cfg.partitions;
    pc.seed = cfg.seed;
    const std::vector<Fold> folds = make_folds(subjects, classes, pc);
    const std::vector<double> shared_grid = uniform_grid();

    std::vector<std::string> ckpt_dirs(folds.size());
    if (cfg.save_checkpoints) {
        std::filesystem::create_directories(cfg.out_dir + "/checkpoints");
        for (std::size_t k = 0; k < folds.size(); ++k)
            ckpt_dirs[k] = cfg.out_dir + "/checkpoints/sp" + std::to_string(folds[k].sp) + "_cp" +
                           std::to_string(folds[k].cp);
    }

    std::vector<detail::FoldOutcome> outcomes(folds.size());
    std::vector<std::string> fold_errors(folds.size());
    const int n_jobs = std::max(1, std::min<int>(cfg.jobs, static_cast<int>(folds.size())));
    if (n_jobs == 1) {
        for (std::size_t k = 0; k < folds.size(); ++k) {
            try {
                outcomes[k] = run_fold(cfg, ds, folds[k], shared_grid, ckpt_dirs[k]);
            } catch (const std::exception& e) {
                throw std::runtime_error("fold sp=" + std::to_string(folds[k].sp) +
                                         " cp=" + std::to_string(folds[k].cp) + ": " + e.what());
            }
        }
    } else {
        std::vector<std::thread> workers;
        for (int w = 0; w < n_jobs; ++w) {
            workers.emplace_back([&, w] {
                for (std::size_t k = w; k < folds.size(); k += n_jobs) {
                    try {
                        outcomes[k] = run_fold(cfg, ds, folds[k], shared_grid, ckpt_dirs[k]);
                    } catch (const std::exception& e) {
                        fold_errors[k] = e.what();
                    }
                }
            });
        }
        for (auto& t : workers) t.join();
        for (std::size_t k = 0; k < folds.size(); ++k)
            if (!fold_errors[k].empty())
                throw std::runtime_error("fold sp=" + std::to_string(folds[k].sp) +
                                         " cp=" + std::to_string(folds[k].cp) + ": " + fold_errors[k]);
    }

    const bool has_ood = cfg.partitions.n_cp > 1;
    nlohmann::json report;
    const std::string config_dump = config_to_json(cfg).dump();
    report["provenance"] = {
        {"version", kVersion},
        {"seed", cfg.seed},
        {"config_hash",
         crc32(reinterpret_cast<const unsigned char*>(config_dump.data()), config_dump.size())}};
    report["config"] = config_to_json(cfg);
    report["folds"] = nlohmann::json::array();
    for (const auto& oc : outcomes) {
        nlohmann::json fj{{"sp", oc.sp}, {"cp", oc.cp}};
        for (const auto& sc : cfg.scorers) {
            const std::string name = sc.name();
            nlohmann::json sj;
            if (oc.auroc.at(name))
                sj["auroc"] = *oc.auroc.at(name);
            if (oc.aupr.at(name))
                sj["aupr"] = *oc.aupr.at(name);
            fj["scorers"][name] = sj;
        }
        report["folds"].push_back(fj);
    }

    // Per-CP and per-SP aggregates (mean +/- std across the folds sharing
    // the partition), and the mean of those columns.
    for (const auto& sc : cfg.scorers) {
        const std::string name = sc.name();
        for (const char* metric : {"auroc", "aupr"}) {
            const bool is_auroc = std::string(metric) == "auroc";
            auto value_of = [&](const detail::FoldOutcome& oc) {
                return is_auroc ? oc.auroc.at(name) : oc.aupr.at(name);
            };
            nlohmann::json cp_list = nlohmann::json::array(), sp_list = nlohmann::json::array();
            std::vector<double> cp_means, sp_means;
            for (int k = 0; k < cfg.partitions.n_cp; ++k) {
                std::vector<double> vals;
                for (const auto& oc : outcomes)
                    if (oc.cp == k && value_of(oc)) vals.push_back(*value_of(oc));
                const auto ms = detail::mean_std(vals);
                cp_list.push_back(detail::ms_json(ms));
                if (ms.n > 0) cp_means.push_back(ms.mean);
            }
            for (int i = 0; i < cfg.partitions.n_sp; ++i) {
                std::vector<double> vals;
                for (const auto& oc : outcomes)
                    if (oc.sp == i && value_of(oc)) vals.push_back(*value_of(oc));
                const auto ms = detail::mean_std(vals);
                sp_list.push_back(detail::ms_json(ms));
                if (ms.n > 0) sp_means.push_back(ms.mean);
            }
            report["aggregates"][name][metric] = {
                {"cp", cp_list},
                {"cp_mean", detail::ms_json(detail::mean_std(cp_means))},
                {"sp", sp_list},
                {"sp_mean", detail::ms_json(detail::mean_std(sp_means))}};
        }
    }

    // Threshold selection per scorer.
    ThresholdConfig tcfg;
    tcfg.w_id = cfg.w_id;
    tcfg.w_ood = cfg.w_ood;
    tcfg.grid = shared_grid;
    tcfg.mode = has_ood ? ThresholdMode::TwoLevel : ThresholdMode::IdOnly;
    std::map<std::string, ThresholdResult> thresholds;
    for (const auto& sc : cfg.scorers) {
        const std::string name = sc.name();
        std::vector<FoldTable> tables;
        for (const auto& oc : outcomes) tables.push_back(oc.tables.at(name));
        ThresholdResult tr = select_threshold(tables, tcfg);
        if (auto it = cfg.tau_override.find(name); it != cfg.tau_override.end())
            tr.tau_m = it->second;
        else if (auto star = cfg.tau_override.find("*"); star != cfg.tau_override.end())
            tr.tau_m = star->second;
        report["tau_m"][name] = tr.tau_m;
        thresholds[name] = std::move(tr);
    }

    // OVR tables for all-classes (n_cp = 1) runs, at tau_0 = 0 and tau_m.
    if (!has_ood) {
        for (const auto& sc : cfg.scorers) {
            const std::string name = sc.name();
            const double tau_m = report["tau_m"][name].get<double>();
            std::vector<double> tpr0, tprm, tnr0, tnrm, bacc0, baccm, f10, f1m, auroc, aupr;
            for (auto& oc : outcomes) {
                const EvalPixels& px = oc.pixels.at(name);
                const OvrMetrics m0 = ovr_metrics(px, 0.0);
                // At tau_m, rejected pixels are discarded rather than counted
                // as false negatives: no ground truth exists for the outlier
                // class in an all-classes run.
                const OvrMetrics mm = ovr_metrics(px, tau_m, true);
                const OvrAreas areas = ovr_curves(px, default_grid(px));
                auto push = [](std::vector<double>& v, const std::optional<double>& x) {
                    if (x) v.push_back(*x);
                };
                push(tpr0, m0.mean_tpr);
                push(tprm, mm.mean_tpr);
                push(tnr0, m0.mean_tnr);
                push(tnrm, mm.mean_tnr);
                push(bacc0, m0.mean_bacc);
                push(baccm, mm.mean_bacc);
                push(f10, m0.mean_f1);
                push(f1m, mm.mean_f1);
                push(auroc, areas.auroc);
                push(aupr, areas.aupr);
            }
            report["ovr"][name] = {{"tpr_tau0", detail::ms_json(detail::mean_std(tpr0))},
                                   {"tpr_taum", detail::ms_json(detail::mean_std(tprm))},
                                   {"tnr_tau0", detail::ms_json(detail::mean_std(tnr0))},
                                   {"tnr_taum", detail::ms_json(detail::mean_std(tnrm))},
                                   {"bacc_tau0", detail::ms_json(detail::mean_std(bacc0))},
                                   {"bacc_taum", detail::ms_json(detail::mean_std(baccm))},
                                   {"f1_tau0", detail::ms_json(detail::mean_std(f10))},
                                   {"f1_taum", detail::ms_json(detail::mean_std(f1m))},
                                   {"auroc", detail::ms_json(detail::mean_std(auroc))},
                                   {"aupr", detail::ms_json(detail::mean_std(aupr))}};
        }
    }

    // ------------------------------------------------------------------
    // File outputs.
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    fs::create_directories(cfg.out_dir + "/curves");
    fs::create_directories(cfg.out_dir + "/confusions");

    {
        std::ofstream f(cfg.out_dir + "/report.json", std::ios::trunc);
        f << report.dump(2) << "\n";
    }
    {
        std::ofstream f(cfg.out_dir + "/folds.txt", std::ios::trunc);
        f << fold_roster_text(folds);
    }

    for (const auto& oc : outcomes) {
        const std::string tag = "sp" + std::to_string(oc.sp) + "_cp" + std::to_string(oc.cp);
        for (const auto& sc : cfg.scorers) {
            const std::string name = sc.name();
            {
                std::ofstream f(cfg.out_dir + "/curves/" + tag + "_" + name + "_roc.csv",
                                std::ios::trunc);
                f << curve_to_csv(oc.roc.at(name));
            }
            {
                std::ofstream f(cfg.out_dir + "/curves/" + tag + "_" + name + "_pr.csv",
                                std::ios::trunc);
                f << curve_to_csv(oc.pr.at(name));
            }
            {
                const double tau_m = report["tau_m"][name].get<double>();
                std::ofstream f(cfg.out_dir + "/confusions/" + tag + "_" + name + ".csv",
                                std::ios::trunc);
                f << confusion_to_csv(confusion_at(oc.pixels.at(name), tau_m));
            }
        }
    }

    for (const auto& sc : cfg.scorers) {
        const std::string name = sc.name();
        std::ofstream f(cfg.out_dir + "/threshold_" + name + ".csv", std::ios::trunc);
        f.precision(17);
        f << "tau,objective\n";
        const auto& tr = thresholds.at(name);
        for (std::size_t t = 0; t < shared_grid.size(); ++t)
            f << shared_grid[t] << "," << tr.objective[t] << "\n";
    }

    if (has_ood) {
        // Mean +/- std curve plots across folds, sampled on the shared grid.
        std::vector<std::pair<std::string, std::vector<std::vector<std::pair<double, double>>>>> roc_series,
            pr_series;
        for (const auto& sc : cfg.scorers) {
            const std::string name = sc.name();
            std::vector<std::vector<std::pair<double, double>>> roc_folds, pr_folds;
            for (const auto& oc : outcomes) {
                const FoldTable& tb = oc.tables.at(name);
                const auto& prec = oc.precision_table.at(name);
                std::vector<std::pair<double, double>> rc, pc;
                for (std::size_t t = 0; t < shared_grid.size(); t += 10) {
                    if (tb.tnr_ood[t]) rc.emplace_back(1.0 - *tb.tnr_ood[t], tb.tpr_id[t]);
                    if (prec[t] >= 0.0) pc.emplace_back(tb.tpr_id[t], prec[t]);
                }
                std::reverse(rc.begin(), rc.end());
                std::reverse(pc.begin(), pc.end());
                roc_folds.push_back(std::move(rc));
                pr_folds.push_back(std::move(pc));
            }
            // Bands need a common x sampling; keep only folds with the full grid.
            std::size_t want = 0;
            for (const auto& rf : roc_folds) want = std::max(want, rf.size());
            roc_folds.erase(std::remove_if(roc_folds.begin(), roc_folds.end(),
                                           [&](const auto& v) { return v.size() != want; }),
                            roc_folds.end());
            std::size_t wantp = 0;
            for (const auto& pf : pr_folds) wantp = std::max(wantp, pf.size());
            pr_folds.erase(std::remove_if(pr_folds.begin(), pr_folds.end(),
                                          [&](const auto& v) { return v.size() != wantp; }),
                           pr_folds.end());
            roc_series.emplace_back(name, std::move(roc_folds));
            pr_series.emplace_back(name, std::move(pr_folds));
        }
        {
            std::ofstream f(cfg.out_dir + "/roc.svg", std::ios::trunc);
            f << detail::curves_svg("ROC (mean across folds)", "FPR_OOD", "TPR_ID", roc_series);
        }
        {
            std::ofstream f(cfg.out_dir + "/pr.svg", std::ios::trunc);
            f << detail::curves_svg("PR (mean across folds)", "recall", "precision", pr_series);
        }
    }

    return report;
}

// ---------------------------------------------------------------------------
// Standalone inference from a saved checkpoint.

struct PredictResult {
    PredictionMask mask;
    ScoreVolume scores;
};

inline PredictResult predict(const std::string& checkpoint_dir, const ScorerSpec& scorer, double tau,
                             const SpectralImage& image) {
    const LoadedModel lm = load_model(checkpoint_dir);
    PredictResult out;
    switch (scorer.kind) {
        case ScorerSpec::Kind::Baseline: {
            auto [logits, feats] = infer_volumes(lm.model, image);
            out.scores = score_baseline(logits);
            break;
        }
        case ScorerSpec::Kind::Odin: {
            auto [logits, feats] = infer_volumes(lm.model, image);
            out.scores = score_odin(logits, scorer.temperature);
            break;
        }
        case ScorerSpec::Kind::Mahalanobis: {
            auto [logits, feats] = infer_volumes(lm.model, image);
            out.scores = score_mahalanobis(feats, load_gaussian_stats(checkpoint_dir + "/stats"));
            break;
        }
        case ScorerSpec::Kind::Godin: {
            if (!lm.has_head) throw std::runtime_error("predict: checkpoint has no GODIN head");
            auto [logits, feats] = infer_volumes(lm.model, image);
            out.scores = score_godin(lm.head, feats);
            break;
        }
    }
    out.mask = decide(out.scores, tau);
    return out;
}

}  // namespace oodseg
