#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "oodseg/rng.hpp"
#include "oodseg/tensor.hpp"

// Deterministic generator of multi-subject, multi-class spectral images
// with sparse positive-only annotations. Class signatures are mutually
// orthogonal unit directions scaled by a separation knob; the background
// spectrum is a flat spectrum orthogonalized against every signature, so
// OOD separability is controlled by class_mean_separation alone.

namespace oodseg {

struct SynthSpec {
    int num_subjects = 6;
    int images_per_subject = 2;
    int height = 24;
    int width = 24;
    int bands = 16;
    int num_classes = 6;
    double class_mean_separation = 3.0;
    double signature_overlap = 0.0;       // blends each class mean toward the next one
    double signature_overlap_mean = 0.0;  // blends each class mean toward the average direction
    double mixed_pixel_fraction = 0.0;  // fraction of class pixels drawn halfway to the next class
    double intra_class_noise = 0.3;
    double subject_shift_scale = 0.1;
    int blob_count_min = 3;
    int blob_count_max = 5;
    double annotation_coverage = 0.6;
    std::uint64_t seed = 0;

    void validate() const {
        if (num_subjects < 1 || images_per_subject < 1 || height < 1 || width < 1 || bands < 1 ||
            num_classes < 1)
            throw std::invalid_argument("SynthSpec: all counts must be positive");
        if (annotation_coverage <= 0.0 || annotation_coverage > 1.0)
            throw std::invalid_argument("SynthSpec: coverage must be in (0,1]");
        if (intra_class_noise < 0.0) throw std::invalid_argument("SynthSpec: noise must be >= 0");
        if (signature_overlap < 0.0 || signature_overlap_mean < 0.0)
            throw std::invalid_argument("SynthSpec: signature overlaps must be >= 0");
        if (mixed_pixel_fraction < 0.0 || mixed_pixel_fraction > 1.0)
            throw std::invalid_argument("SynthSpec: mixed_pixel_fraction must be in [0,1]");
        if (blob_count_min < 1 || blob_count_max < blob_count_min)
            throw std::invalid_argument("SynthSpec: invalid blob count range");
        if (bands <= num_classes)
            throw std::invalid_argument("SynthSpec: bands must exceed num_classes");
    }
};

struct SynthDataset {
    std::vector<SpectralImage> images;
    std::vector<SparseAnnotation> annotations;
    std::vector<int> subject_of;                       // image index -> subject id
    std::vector<std::vector<double>> class_signatures; // C x bands (already scaled)
    std::vector<double> background_signature;          // bands (already scaled)
};

namespace detail {

inline void normalize(std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
}

inline void orthogonalize_against(std::vector<double>& v, const std::vector<double>& u) {
    double d = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) d += v[i] * u[i];
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= d * u[i];
}

// Mutually orthonormal random directions via Gram-Schmidt.
inline std::vector<std::vector<double>> orthonormal_directions(int count, int dim, Rng& rng) {
    std::vector<std::vector<double>> dirs;
    while (static_cast<int>(dirs.size()) < count) {
        std::vector<double> v(dim);
        for (double& x : v) x = rng.gaussian();
        for (const auto& u : dirs) orthogonalize_against(v, u);
        double n = 0.0;
        for (double x : v) n += x * x;
        if (n < 1e-12) continue;  // degenerate draw
        normalize(v);
        dirs.push_back(std::move(v));
    }
    return dirs;
}

struct Blob {
    double ci, cj, a, b, cos_t, sin_t;
    int cls;

    bool contains(int i, int j) const {
        const double di = i - ci, dj = j - cj;
        const double x = cos_t * dj + sin_t * di;
        const double y = -sin_t * dj + cos_t * di;
        return (x * x) / (a * a) + (y * y) / (b * b) <= 1.0;
    }
};

}  // namespace detail

inline SynthDataset generate(const SynthSpec& spec) {
    spec.validate();
    SynthDataset ds;
    const int B = spec.bands;
    const int C = spec.num_classes;

    Rng sig_rng(mix_seed(spec.seed, {0x534947ull}));
    auto dirs = detail::orthonormal_directions(C, B, sig_rng);
    ds.class_signatures.resize(C);
    std::vector<double> mean_dir(B, 0.0);
    for (const auto& d : dirs)
        for (int a = 0; a < B; ++a) mean_dir[a] += d[a] / C;
    for (int c = 0; c < C; ++c) {
        // Chain overlap: each class mean leans toward the next class, so a
        // held-out class resembles one of the remaining in-distribution
        // classes instead of being orthogonal to all of them. The mean
        // overlap additionally gives every class a shared component, so a
        // held-out class mildly excites all remaining classes.
        auto sig = dirs[c];
        if ((spec.signature_overlap > 0.0 || spec.signature_overlap_mean > 0.0) && C > 1) {
            const auto& next = dirs[(c + 1) % C];
            for (int a = 0; a < B; ++a)
                sig[a] += spec.signature_overlap * next[a] + spec.signature_overlap_mean * mean_dir[a];
            detail::normalize(sig);
        }
        for (double& v : sig) v *= spec.class_mean_separation;
        ds.class_signatures[c] = std::move(sig);
    }
    ds.background_signature.assign(B, 1.0 / std::sqrt(static_cast<double>(B)));
    for (const auto& d : dirs) detail::orthogonalize_against(ds.background_signature, d);
    detail::normalize(ds.background_signature);
    for (double& v : ds.background_signature) v *= spec.class_mean_separation;

    std::vector<std::vector<double>> subject_offsets(spec.num_subjects);
    for (int s = 0; s < spec.num_subjects; ++s) {
        Rng rng(mix_seed(spec.seed, {0x535542ull, static_cast<std::uint64_t>(s)}));
        auto& off = subject_offsets[s];
        off.resize(B);
        for (double& v : off) v = rng.gaussian();
        detail::normalize(off);
        for (double& v : off) v *= spec.subject_shift_scale;
    }

    const int n_images = spec.num_subjects * spec.images_per_subject;
    const int H = spec.height, W = spec.width;
    for (int m = 0; m < n_images; ++m) {
        const int subject = m / spec.images_per_subject;
        SparseAnnotation ann;
        ann.height = H;
        ann.width = W;
        ann.num_classes = C;
        std::vector<int> owner;  // pixel -> blob index + 1, 0 = background

        // Retry with a remixed sub-seed until at least one pixel is
        // annotated (tiny blobs can vanish entirely under erosion).
        std::vector<detail::Blob> blobs;
        for (std::uint64_t attempt = 0;; ++attempt) {
            Rng rng(mix_seed(spec.seed, {0x494D47ull, static_cast<std::uint64_t>(m), attempt}));
            const int n_blobs = rng.uniform_int(spec.blob_count_min, spec.blob_count_max);
            blobs.clear();
            const double max_axis = std::max(3.0, std::min(H, W) / 4.0);
            for (int bidx = 0; bidx < n_blobs; ++bidx) {
                detail::Blob blob;
                blob.ci = rng.uniform(0.0, H);
                blob.cj = rng.uniform(0.0, W);
                blob.a = rng.uniform(2.5, max_axis);
                blob.b = rng.uniform(2.5, max_axis);
                const double theta = rng.uniform(0.0, M_PI);
                blob.cos_t = std::cos(theta);
                blob.sin_t = std::sin(theta);
                blob.cls = rng.uniform_int(1, C);
                blobs.push_back(blob);
            }

            owner.assign(static_cast<std::size_t>(H) * W, 0);
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j)
                    for (int bidx = static_cast<int>(blobs.size()) - 1; bidx >= 0; --bidx)
                        if (blobs[bidx].contains(i, j)) {
                            owner[static_cast<std::size_t>(i) * W + j] = bidx + 1;
                            break;
                        }

            // Per blob: erode one pixel from the boundary, then label a
            // coverage fraction of the remaining pixels.
            ann.labels.assign(static_cast<std::size_t>(H) * W, 0);
            for (int bidx = 0; bidx < static_cast<int>(blobs.size()); ++bidx) {
                std::vector<int> interior;
                for (int i = 0; i < H; ++i) {
                    for (int j = 0; j < W; ++j) {
                        if (owner[static_cast<std::size_t>(i) * W + j] != bidx + 1) continue;
                        bool inner = i > 0 && i < H - 1 && j > 0 && j < W - 1;
                        if (inner)
                            inner = owner[static_cast<std::size_t>(i - 1) * W + j] == bidx + 1 &&
                                    owner[static_cast<std::size_t>(i + 1) * W + j] == bidx + 1 &&
                                    owner[static_cast<std::size_t>(i) * W + j - 1] == bidx + 1 &&
                                    owner[static_cast<std::size_t>(i) * W + j + 1] == bidx + 1;
                        if (inner) interior.push_back(i * W + j);
                    }
                }
                rng.shuffle(interior);
                const int take = static_cast<int>(
                    std::lround(spec.annotation_coverage * static_cast<double>(interior.size())));
                for (int t = 0; t < take; ++t) ann.labels[interior[t]] = blobs[bidx].cls;
            }

            bool any = false;
            for (int v : ann.labels)
                if (v) {
                    any = true;
                    break;
                }
            if (any) break;
        }

        SpectralImage img;
        img.height = H;
        img.width = W;
        img.bands = B;
        img.data.resize(static_cast<std::size_t>(H) * W * B);
        Rng noise_rng(mix_seed(spec.seed, {0x4E4F49ull, static_cast<std::uint64_t>(m)}));
        for (int i = 0; i < H; ++i) {
            for (int j = 0; j < W; ++j) {
                const int own = owner[static_cast<std::size_t>(i) * W + j];
                const std::vector<double>& base =
                    own ? ds.class_signatures[blobs[own - 1].cls - 1] : ds.background_signature;
                // Mixed pixels sit halfway between their class and the next
                // one; with the classes symmetric this forces the learned
                // decision boundary through them, leaving near-tied logits.
                const bool mixed = own && spec.mixed_pixel_fraction > 0.0 &&
                                   noise_rng.uniform() < spec.mixed_pixel_fraction;
                const std::vector<double>* other = nullptr;
                if (mixed) other = &ds.class_signatures[blobs[own - 1].cls % C];
                for (int b = 0; b < B; ++b) {
                    double v = (mixed ? 0.5 * (base[b] + (*other)[b]) : base[b]) +
                               subject_offsets[subject][b];
                    if (spec.intra_class_noise > 0.0) v += spec.intra_class_noise * noise_rng.gaussian();
                    img.at(i, j, b) = v;
                }
            }
        }
        ds.images.push_back(std::move(img));
        ds.annotations.push_back(std::move(ann));
        ds.subject_of.push_back(subject);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Export via the core tensor container plus a manifest listing subject ids.

inline void export_dataset(const std::string& dir, const SynthDataset& ds) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["num_images"] = ds.images.size();
    manifest["subject_of"] = ds.subject_of;
    manifest["num_classes"] = ds.annotations.empty() ? 0 : ds.annotations.front().num_classes;
    for (std::size_t m = 0; m < ds.images.size(); ++m) {
        const auto& img = ds.images[m];
        write_tensor(dir + "/image" + std::to_string(m),
                     {static_cast<std::size_t>(img.height), static_cast<std::size_t>(img.width),
                      static_cast<std::size_t>(img.bands)},
                     img.data);
        std::vector<double> lbl(ds.annotations[m].labels.begin(), ds.annotations[m].labels.end());
        write_tensor(dir + "/labels" + std::to_string(m),
                     {static_cast<std::size_t>(img.height), static_cast<std::size_t>(img.width)}, lbl);
    }
    std::vector<double> sig_flat;
    for (const auto& s : ds.class_signatures) sig_flat.insert(sig_flat.end(), s.begin(), s.end());
    write_tensor(dir + "/signatures",
                 {ds.class_signatures.size(), ds.class_signatures.front().size()}, sig_flat);
    std::ofstream f(dir + "/dataset.json", std::ios::trunc);
    if (!f) throw std::runtime_error("export_dataset: cannot open " + dir + "/dataset.json");
    f << manifest.dump(2) << "\n";
}

inline SynthDataset load_dataset(const std::string& dir) {
    std::ifstream f(dir + "/dataset.json");
    if (!f) throw std::runtime_error("load_dataset: missing " + dir + "/dataset.json");
    nlohmann::json manifest = nlohmann::json::parse(f);
    SynthDataset ds;
    const std::size_t n = manifest.at("num_images").get<std::size_t>();
    ds.subject_of = manifest.at("subject_of").get<std::vector<int>>();
    const int C = manifest.at("num_classes").get<int>();
    for (std::size_t m = 0; m < n; ++m) {
        auto [ishape, idata] = read_tensor(dir + "/image" + std::to_string(m));
        SpectralImage img;
        img.height = static_cast<int>(ishape[0]);
        img.width = static_cast<int>(ishape[1]);
        img.bands = static_cast<int>(ishape[2]);
        img.data = std::move(idata);
        ds.images.push_back(std::move(img));

        auto [lshape, ldata] = read_tensor(dir + "/labels" + std::to_string(m));
        SparseAnnotation ann;
        ann.height = static_cast<int>(lshape[0]);
        ann.width = static_cast<int>(lshape[1]);
        ann.num_classes = C;
        ann.labels.resize(ldata.size());
        for (std::size_t i = 0; i < ldata.size(); ++i) ann.labels[i] = static_cast<int>(ldata[i]);
        ds.annotations.push_back(std::move(ann));
    }
    auto [sshape, sdata] = read_tensor(dir + "/signatures");
    ds.class_signatures.resize(sshape[0]);
    for (std::size_t c = 0; c < sshape[0]; ++c)
        ds.class_signatures[c].assign(sdata.begin() + c * sshape[1], sdata.begin() + (c + 1) * sshape[1]);
    return ds;
}

}  // namespace oodseg
