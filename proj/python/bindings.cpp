#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "emodiff/bank.hpp"
#include "emodiff/embedder.hpp"
#include "emodiff/eval.hpp"
#include "emodiff/synthdata.hpp"
#include "emodiff/tensor.hpp"

namespace py = pybind11;
using namespace emodiff;

namespace {

Tensor matrix_from(const std::vector<std::vector<double>>& rows, const char* name) {
    if (rows.empty()) throw ArgumentError(std::string(name) + ": empty matrix");
    const std::size_t cols = rows[0].size();
    std::vector<double> flat;
    flat.reserve(rows.size() * cols);
    for (const auto& r : rows) {
        if (r.size() != cols) throw ArgumentError(std::string(name) + ": ragged matrix");
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(flat));
}

std::vector<std::vector<double>> matrix_to(const Tensor& t) {
    std::vector<std::vector<double>> out(t.dim(0), std::vector<double>(t.dim(1)));
    for (std::size_t i = 0; i < t.dim(0); ++i) {
        for (std::size_t j = 0; j < t.dim(1); ++j) out[i][j] = t.at(i, j);
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Emotion-conditioned toy latent diffusion core operations";
    m.attr("__version__") = "0.1.0";

    py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

    m.def(
        "softmax",
        [](const std::vector<double>& values) {
            Tensor t({values.size()}, values);
            return softmax(t, 0).data();
        },
        py::arg("values"), "Numerically stable softmax of a vector");

    m.def(
        "attention",
        [](const std::vector<std::vector<double>>& q, const std::vector<std::vector<double>>& k,
           const std::vector<std::vector<double>>& v) {
            return matrix_to(scaled_dot_attention(matrix_from(q, "Q"), matrix_from(k, "K"),
                                                  matrix_from(v, "V")));
        },
        py::arg("q"), py::arg("k"), py::arg("v"),
        "Single-head scaled dot-product attention (rows = tokens)");

    m.def(
        "info_nce",
        [](const std::vector<double>& anchor, const std::vector<double>& positive,
           const std::vector<std::vector<double>>& negatives, double tau) {
            Tensor a({anchor.size()}, anchor);
            Tensor p({positive.size()}, positive);
            std::vector<Tensor> negs;
            negs.reserve(negatives.size());
            for (const auto& n : negatives) negs.push_back(Tensor({n.size()}, n));
            return info_nce(a, p, negs, tau).value();
        },
        py::arg("anchor"), py::arg("positive"), py::arg("negatives"), py::arg("tau") = 0.1,
        "Cosine-similarity InfoNCE loss");

    m.def(
        "vq_loss",
        [](const std::vector<double>& s, const std::vector<std::vector<double>>& codes, double beta) {
            EmotionBank bank(codes.size(), s.size(), 0);
            bank.params().get("bank.codes").value.mutable_data() = matrix_from(codes, "codes").data();
            Tensor sv({s.size()}, s, /*requires_grad=*/true);
            Tensor loss = bank.vq_loss(sv, beta);
            bank.params().zero_grad();
            backward(loss);
            py::dict out;
            out["loss"] = loss.value();
            out["grad_s"] = sv.grad();
            out["grad_codes"] = bank.params().get("bank.codes").value.grad();
            out["nearest"] = bank.retrieve(Tensor({s.size()}, s)).first;
            return out;
        },
        py::arg("s"), py::arg("codes"), py::arg("beta") = 0.25,
        "VQ loss with stop-gradient semantics; returns loss, gradients and the nearest code");

    m.def(
        "grad_check_sum",
        [](const std::vector<double>& values, double eps) {
            Tensor x({values.size()}, values);
            return grad_check([](const Tensor& t) { return sum(square(t)); }, x, eps);
        },
        py::arg("values"), py::arg("eps") = 1e-5,
        "Max relative error of the analytic vs central-difference gradient of sum(x^2)");

    m.def(
        "generate_corpus",
        [](const std::string& out_dir, std::uint64_t seed, std::uint32_t identities,
           std::uint32_t intensities, std::uint32_t clips_per_cell, std::uint32_t frames,
           std::uint32_t feature_dim) {
            CorpusConfig cfg;
            cfg.identities = identities;
            cfg.intensities = intensities;
            cfg.clips_per_cell = clips_per_cell;
            cfg.frames = frames;
            cfg.feature_dim = feature_dim;
            auto corpus = generate_corpus(cfg, seed);
            export_corpus(corpus, out_dir);
            return corpus.size();
        },
        py::arg("out_dir"), py::arg("seed") = 0, py::arg("identities") = 6,
        py::arg("intensities") = 3, py::arg("clips_per_cell") = 4, py::arg("frames") = 16,
        py::arg("feature_dim") = 24,
        "Generate the synthetic corpus and write it (clip files + index.jsonl)");

    m.def(
        "condition_drop_rates",
        [](std::size_t draws, std::uint64_t seed) {
            RandomStream rng(seed);
            std::size_t audio = 0, image = 0, emotion = 0, all = 0;
            for (std::size_t i = 0; i < draws; ++i) {
                const ConditionDropFlags f = condition_dropout(rng);
                if (f.audio && f.image && f.emotion) {
                    ++all;
                } else if (f.audio) {
                    ++audio;
                } else if (f.image) {
                    ++image;
                } else if (f.emotion) {
                    ++emotion;
                }
            }
            py::dict out;
            const double n = static_cast<double>(draws);
            out["audio"] = audio / n;
            out["image"] = image / n;
            out["emotion"] = emotion / n;
            out["all"] = all / n;
            return out;
        },
        py::arg("draws") = 100000, py::arg("seed") = 0,
        "Empirical rates of the four disjoint condition-dropout events");

    m.def(
        "clustering_strength",
        [](const std::vector<std::pair<std::vector<double>, std::uint32_t>>& embeddings) {
            std::vector<LabeledVector> labeled;
            labeled.reserve(embeddings.size());
            for (const auto& [vec, label] : embeddings) labeled.push_back({vec, label});
            return clustering_strength(labeled);
        },
        py::arg("embeddings"), "Inter/intra cluster distance ratio of labeled embeddings");

    m.def(
        "interpolate",
        [](const std::vector<double>& a, const std::vector<double>& b, std::size_t steps) {
            EmotionPrior pa, pb;
            pa.sample = Tensor({a.size()}, a);
            pa.mu = pa.sample;
            pa.sigma2 = Tensor::zeros({a.size()});
            pb.sample = Tensor({b.size()}, b);
            pb.mu = pb.sample;
            pb.sigma2 = Tensor::zeros({b.size()});
            std::vector<std::vector<double>> out;
            for (const Tensor& t : interpolate(pa, pb, steps)) out.push_back(t.data());
            return out;
        },
        py::arg("a"), py::arg("b"), py::arg("steps") = 5,
        "Evenly spaced linear interpolation between two embeddings");

    m.def(
        "project_2d",
        [](const std::vector<std::vector<double>>& embeddings) {
            Projection2D p = project_2d(embeddings);
            py::dict out;
            out["coords"] = p.coords;
            out["variance_explained"] = p.variance_explained;
            out["degenerate"] = p.degenerate;
            return out;
        },
        py::arg("embeddings"), "Deterministic top-2 principal component projection");
}
