#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "oodseg/runner.hpp"

// Command-line front end: dataset synthesis, full experiment runs,
// single-image inference from a checkpoint, and report summaries.

namespace {

using namespace oodseg;

std::string default_out(const std::string& flag_value) {
    if (!flag_value.empty()) return flag_value;
    if (const char* env = std::getenv("OODSEG_OUT")) return env;
    return "out";
}

int cmd_synth(const SynthSpec& spec, const std::string& out) {
    const SynthDataset ds = generate(spec);
    export_dataset(out, ds);
    std::cout << "wrote " << ds.images.size() << " images to " << out << "\n";
    return 0;
}

int cmd_run(ExperimentConfig cfg) {
    const nlohmann::json report = run(cfg);
    std::cout << "report: " << cfg.out_dir << "/report.json\n";
    if (report.contains("aggregates")) {
        for (const auto& [scorer, agg] : report["aggregates"].items()) {
            const auto& a = agg["auroc"]["cp_mean"];
            const auto& p = agg["aupr"]["cp_mean"];
            std::cout << scorer << ": ";
            if (!a.is_null())
                std::cout << "AUROC " << a["mean"].get<double>() << " +/- " << a["std"].get<double>();
            if (!p.is_null())
                std::cout << "  AUPR " << p["mean"].get<double>() << " +/- " << p["std"].get<double>();
            std::cout << "\n";
        }
    }
    for (const auto& [scorer, tau] : report["tau_m"].items())
        std::cout << "tau_m[" << scorer << "] = " << tau.get<double>() << "\n";
    return 0;
}

int cmd_predict(const std::string& checkpoint, const ScorerSpec& scorer, double tau,
                const std::string& image_path, const std::string& out) {
    auto [shape, data] = read_tensor(image_path);
    if (shape.size() != 3) throw std::runtime_error("predict: image tensor must be H x W x B");
    SpectralImage img;
    img.height = static_cast<int>(shape[0]);
    img.width = static_cast<int>(shape[1]);
    img.bands = static_cast<int>(shape[2]);
    img.data = std::move(data);

    const PredictResult res = predict(checkpoint, scorer, tau, img);
    std::filesystem::create_directories(out);
    std::vector<double> mask(res.mask.labels.begin(), res.mask.labels.end());
    write_tensor(out + "/mask",
                 {static_cast<std::size_t>(img.height), static_cast<std::size_t>(img.width)}, mask);
    write_tensor(out + "/scores",
                 {static_cast<std::size_t>(img.height), static_cast<std::size_t>(img.width),
                  static_cast<std::size_t>(res.scores.num_classes)},
                 res.scores.data);
    std::cout << "wrote " << out << "/mask and " << out << "/scores\n";
    return 0;
}

int cmd_report(const std::string& in) {
    std::ifstream f(in + "/report.json");
    if (!f) throw std::runtime_error("report: cannot open " + in + "/report.json");
    const nlohmann::json report = nlohmann::json::parse(f);

    std::cout << "seed: " << report["provenance"]["seed"] << "  config_hash: "
              << report["provenance"]["config_hash"] << "\n";
    auto cell = [](const nlohmann::json& ms) {
        if (ms.is_null()) return std::string("-");
        std::ostringstream os;
        os.precision(4);
        os << ms["mean"].get<double>() << "+/-" << ms["std"].get<double>();
        return os.str();
    };
    if (report.contains("aggregates")) {
        for (const auto& [scorer, agg] : report["aggregates"].items()) {
            std::cout << scorer << "\n";
            for (const char* metric : {"auroc", "aupr"}) {
                std::cout << "  " << metric << "  cp:";
                for (const auto& ms : agg[metric]["cp"]) std::cout << " " << cell(ms);
                std::cout << "  mean " << cell(agg[metric]["cp_mean"]) << "\n";
                std::cout << "  " << metric << "  sp:";
                for (const auto& ms : agg[metric]["sp"]) std::cout << " " << cell(ms);
                std::cout << "  mean " << cell(agg[metric]["sp_mean"]) << "\n";
            }
        }
    }
    if (report.contains("ovr")) {
        for (const auto& [scorer, t] : report["ovr"].items()) {
            std::cout << scorer << " (one-vs-rest)\n";
            for (const auto& [key, ms] : t.items()) std::cout << "  " << key << ": " << cell(ms) << "\n";
        }
    }
    for (const auto& [scorer, tau] : report["tau_m"].items())
        std::cout << "tau_m[" << scorer << "] = " << tau.get<double>() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pixel-level out-of-distribution segmentation toolkit"};
    app.require_subcommand(1);

    using namespace oodseg;

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    SynthSpec spec;
    std::string synth_out;
    synth->add_option("--out", synth_out, "output directory");
    synth->add_option("--seed", spec.seed, "dataset seed");
    synth->add_option("--subjects", spec.num_subjects, "number of subjects");
    synth->add_option("--images-per-subject", spec.images_per_subject, "images per subject");
    synth->add_option("--height", spec.height, "image height");
    synth->add_option("--width", spec.width, "image width");
    synth->add_option("--bands", spec.bands, "spectral bands");
    synth->add_option("--classes", spec.num_classes, "number of classes");

    // run
    auto* runc = app.add_subcommand("run", "run a full cross-validated experiment");
    std::string config_path, run_out;
    std::uint64_t run_seed = 0;
    int n_sp = 0, n_cp = 0, jobs = 0;
    double w_id = -1.0, w_ood = -1.0;
    runc->add_option("--config", config_path, "experiment config (json)")->required();
    auto* seed_opt = runc->add_option("--seed", run_seed, "override config seed");
    runc->add_option("--out", run_out, "output directory");
    runc->add_option("--n-sp", n_sp, "override subject partitions");
    runc->add_option("--n-cp", n_cp, "override class partitions");
    runc->add_option("--jobs", jobs, "fold-level parallelism");
    runc->add_option("--w-id", w_id, "threshold objective weight on TPR_ID");
    runc->add_option("--w-ood", w_ood, "threshold objective weight on TNR_OOD");

    // predict
    auto* pred = app.add_subcommand("predict", "segment one image from a saved checkpoint");
    std::string ckpt, image_path, pred_out, scorer_name = "baseline", sim_name = "ip";
    double tau = 0.0, temperature = 10.0;
    int head_context = 1;
    pred->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
    pred->add_option("--image", image_path, "input image tensor (H x W x B)")->required();
    pred->add_option("--scorer", scorer_name, "baseline|odin|mahalanobis|godin")
        ->check(CLI::IsMember({"baseline", "odin", "mahalanobis", "godin"}));
    pred->add_option("--tau", tau, "rejection threshold")->check(CLI::Range(0.0, 1.0));
    pred->add_option("--temperature", temperature, "odin temperature")
        ->check(CLI::PositiveNumber);
    pred->add_option("--similarity", sim_name, "godin similarity: ip|euclid|cos")
        ->check(CLI::IsMember({"ip", "euclid", "cos"}));
    pred->add_option("--context", head_context, "godin head context (1 or 3)")
        ->check(CLI::IsMember({1, 3}));
    pred->add_option("--out", pred_out, "output directory");

    // report
    auto* rep = app.add_subcommand("report", "print a summary of a finished run");
    std::string report_in;
    rep->add_option("--in", report_in, "experiment output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints the message or help text
        return code == 0 ? 0 : 2;      // usage errors exit 2
    }

    try {
        if (synth->parsed()) return cmd_synth(spec, default_out(synth_out));
        if (runc->parsed()) {
            ExperimentConfig cfg = load_config(config_path);
            if (seed_opt->count()) cfg.seed = run_seed;
            cfg.out_dir = default_out(run_out.empty() ? cfg.out_dir : run_out);
            if (n_sp > 0) cfg.partitions.n_sp = n_sp;
            if (n_cp > 0) cfg.partitions.n_cp = n_cp;
            if (jobs > 0) cfg.jobs = jobs;
            if (w_id >= 0.0) cfg.w_id = w_id;
            if (w_ood >= 0.0) cfg.w_ood = w_ood;
            return cmd_run(std::move(cfg));
        }
        if (pred->parsed()) {
            ScorerSpec sc;
            sc.kind = ScorerSpec::kind_from_name(scorer_name);
            sc.temperature = temperature;
            sc.similarity = similarity_from_name(sim_name);
            sc.head_context = head_context;
            return cmd_predict(ckpt, sc, tau, image_path, default_out(pred_out));
        }
        if (rep->parsed()) return cmd_report(report_in);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
