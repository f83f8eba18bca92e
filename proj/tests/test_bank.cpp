#include <doctest.h>

#include <cmath>

#include "emodiff/bank.hpp"
#include "emodiff/rng.hpp"
#include "grad_utils.hpp"

using namespace emodiff;

namespace {

void set_codes(EmotionBank& bank, const std::vector<double>& values) {
    bank.params().get("bank.codes").value.mutable_data() = values;
}

void set_identity(EmotionBank& bank, const std::string& name) {
    auto& data = bank.params().get(name).value.mutable_data();
    std::fill(data.begin(), data.end(), 0.0);
    const std::size_t d = bank.dim();
    for (std::size_t i = 0; i < d; ++i) data[i * d + i] = 1.0;
}

}  // namespace

TEST_CASE("retrieve: nearest code, tie break, K = 1") {
    EmotionBank bank(2, 2, 1);
    set_codes(bank, {0.0, 0.0, 1.0, 1.0});
    auto [k, snapshot] = bank.retrieve(Tensor({2}, {0.9, 0.8}));
    CHECK(k == 1);  // distances 1.45 vs 0.05
    CHECK(snapshot.at(0) == 1.0);
    CHECK(snapshot.at(1) == 1.0);
    CHECK_FALSE(snapshot.requires_grad());

    EmotionBank single(1, 2, 2);
    CHECK(single.retrieve(Tensor({2}, {5.0, -3.0})).first == 0);

    // equidistant from codes 0 and 2 -> lowest index wins
    EmotionBank three(3, 1, 3);
    set_codes(three, {1.0, 10.0, -1.0});
    CHECK(three.retrieve(Tensor({1}, {0.0})).first == 0);
}

TEST_CASE("retrieve agrees with an exhaustive scan for K up to 64") {
    RandomStream rng(4);
    for (std::size_t k_codes : {2u, 7u, 16u, 64u}) {
        EmotionBank bank(k_codes, 5, 100 + k_codes);
        Tensor s = Tensor::randn({5}, rng);
        const auto& codes = bank.codes().data();
        std::size_t best = 0;
        double best_dist = 1e300;
        for (std::size_t k = 0; k < k_codes; ++k) {
            double dist = 0.0;
            for (std::size_t j = 0; j < 5; ++j) {
                const double diff = s.at(j) - codes[k * 5 + j];
                dist += diff * diff;
            }
            if (dist < best_dist) {
                best_dist = dist;
                best = k;
            }
        }
        CHECK(bank.retrieve(s).first == best);
    }
}

TEST_CASE("train-time bank attention degenerates to W_V(C_k) bit-exactly") {
    EmotionBank bank(4, 3, 5);
    RandomStream rng(6);
    for (int rep = 0; rep < 10; ++rep) {
        Tensor s = Tensor::randn({3}, rng, 2.0);
        ConditionEmbedding cond = bank.attend_train(s);
        CHECK(cond.source_mode == ConditionSource::kTrainRetrieved);
        const std::size_t k = bank.retrieve(s).first;
        CHECK(cond.retrieved_index == k);
        Tensor expected = matmul(reshape(stop_gradient(select_row(bank.codes(), k)), {1, 3}),
                                 bank.params().get("bank.wv").value);
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(cond.e_s.at(0, j) == expected.at(0, j));  // bit-exact one-key path
        }
    }
}

TEST_CASE("train-time attention with identity W_V returns the code itself") {
    EmotionBank bank(3, 4, 7);
    set_identity(bank, "bank.wv");
    RandomStream rng(8);
    Tensor s = Tensor::randn({4}, rng);
    ConditionEmbedding cond = bank.attend_train(s);
    const std::size_t k = bank.retrieve(s).first;
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(cond.e_s.at(0, j) == bank.codes().at(k, j));
    }
}

TEST_CASE("inference attention: K = 1 equals the train path") {
    EmotionBank bank(1, 3, 9);
    RandomStream rng(10);
    Tensor s = Tensor::randn({3}, rng);
    ConditionEmbedding train_mode = bank.attend_train(s);
    ConditionEmbedding infer_mode = bank.attend_infer(s);
    CHECK(infer_mode.source_mode == ConditionSource::kInferFullBank);
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(infer_mode.e_s.at(0, j) == train_mode.e_s.at(0, j));
    }
}

TEST_CASE("inference attention: identical codes collapse to W_V(code)") {
    EmotionBank bank(5, 2, 11);
    set_codes(bank, {0.4, -0.7, 0.4, -0.7, 0.4, -0.7, 0.4, -0.7, 0.4, -0.7});
    RandomStream rng(12);
    Tensor s = Tensor::randn({2}, rng);
    ConditionEmbedding cond = bank.attend_infer(s);
    Tensor expected = matmul(Tensor({1, 2}, {0.4, -0.7}), bank.params().get("bank.wv").value);
    for (std::size_t j = 0; j < 2; ++j) {
        CHECK(cond.e_s.at(0, j) == doctest::Approx(expected.at(0, j)).epsilon(1e-12));
    }
}

TEST_CASE("inference attention matches a brute-force softmax mixture to 1e-10") {
    EmotionBank bank(3, 4, 13);
    RandomStream rng(14);
    // non-identity projections to exercise the general path
    bank.params().get("bank.wq").value.mutable_data() = Tensor::randn({4, 4}, rng).data();
    bank.params().get("bank.wk").value.mutable_data() = Tensor::randn({4, 4}, rng).data();
    bank.params().get("bank.wv").value.mutable_data() = Tensor::randn({4, 4}, rng).data();
    Tensor s = Tensor::randn({4}, rng);
    ConditionEmbedding cond = bank.attend_infer(s);

    const auto& wq = bank.params().get("bank.wq").value.data();
    const auto& wk = bank.params().get("bank.wk").value.data();
    const auto& wv = bank.params().get("bank.wv").value.data();
    const auto& codes = bank.codes().data();
    auto project_vec = [&](const double* x, const std::vector<double>& w) {
        std::vector<double> out(4, 0.0);
        for (std::size_t j = 0; j < 4; ++j) {
            for (std::size_t p = 0; p < 4; ++p) out[j] += x[p] * w[p * 4 + j];
        }
        return out;
    };
    const auto q = project_vec(s.data().data(), wq);
    std::vector<double> logits(3);
    for (std::size_t k = 0; k < 3; ++k) {
        const auto key = project_vec(&codes[k * 4], wk);
        double dot_qk = 0.0;
        for (std::size_t p = 0; p < 4; ++p) dot_qk += q[p] * key[p];
        logits[k] = dot_qk / 2.0;  // sqrt(d) = 2
    }
    const double mx = std::max({logits[0], logits[1], logits[2]});
    double z = 0.0;
    for (double& l : logits) {
        l = std::exp(l - mx);
        z += l;
    }
    for (std::size_t j = 0; j < 4; ++j) {
        double expected = 0.0;
        for (std::size_t k = 0; k < 3; ++k) {
            expected += (logits[k] / z) * project_vec(&codes[k * 4], wv)[j];
        }
        CHECK(cond.e_s.at(0, j) == doctest::Approx(expected).epsilon(1e-10));
    }

    // convex-hull property: the output is a simplex mix of projected codes
    double min_v[4], max_v[4];
    for (std::size_t j = 0; j < 4; ++j) {
        min_v[j] = 1e300;
        max_v[j] = -1e300;
        for (std::size_t k = 0; k < 3; ++k) {
            const double pv = project_vec(&codes[k * 4], wv)[j];
            min_v[j] = std::min(min_v[j], pv);
            max_v[j] = std::max(max_v[j], pv);
        }
        CHECK(cond.e_s.at(0, j) >= min_v[j] - 1e-12);
        CHECK(cond.e_s.at(0, j) <= max_v[j] + 1e-12);
    }
}

TEST_CASE("vq_loss: value, gradients and stop-gradient semantics") {
    EmotionBank bank(2, 2, 15);
    set_codes(bank, {0.0, 0.0, 5.0, 5.0});

    // s == C_k: zero loss, zero gradients
    Tensor s_eq({2}, {0.0, 0.0}, true);
    Tensor zero_loss = bank.vq_loss(s_eq, 0.25);
    CHECK(zero_loss.value() == 0.0);
    bank.params().zero_grad();
    backward(zero_loss);
    for (double g : s_eq.grad()) CHECK(g == 0.0);
    for (double g : bank.params().get("bank.codes").value.grad()) CHECK(g == 0.0);

    // s = [1, 0], C_k = [0, 0], beta = 0.25: loss = 1.25
    Tensor s({2}, {1.0, 0.0}, true);
    Tensor loss = bank.vq_loss(s, 0.25);
    CHECK(loss.value() == doctest::Approx(1.25).epsilon(1e-15));

    bank.params().zero_grad();
    backward(loss);
    // d/ds = 2 beta (s - C_k) = [0.5, 0]; d/dC_k = 2 (C_k - s) = [-2, 0]
    CHECK(s.grad()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(s.grad()[1] == doctest::Approx(0.0));
    const auto& cg = bank.params().get("bank.codes").value.grad();
    CHECK(cg[0] == doctest::Approx(-2.0).epsilon(1e-12));
    CHECK(cg[1] == doctest::Approx(0.0));
    CHECK(cg[2] == 0.0);  // non-retrieved code untouched
    CHECK(cg[3] == 0.0);

    CHECK_THROWS_AS(bank.vq_loss(s, 0.0), ArgumentError);
}

TEST_CASE("vq_loss: single-branch finite differences and zero cross-leakage") {
    EmotionBank bank(3, 3, 16);
    RandomStream rng(17);
    set_codes(bank, Tensor::randn({3, 3}, rng, 0.5).data());
    const double beta = 0.25;
    std::vector<double> s_data = {0.9, -0.2, 0.4};

    // pick a code far from any retrieval boundary for the FD probes
    Tensor s({3}, s_data, true);
    const std::size_t k = bank.retrieve(s).first;

    bank.params().zero_grad();
    Tensor loss = bank.vq_loss(s, beta);
    backward(loss);
    const std::vector<double> grad_s = s.grad();
    const std::vector<double> grad_c = bank.params().get("bank.codes").value.grad();

    // single-branch oracles with the retrieved index pinned: the autodiff
    // gradient of each input must match finite differences of the one term
    // that is allowed to see it, and nothing from the other (stop-gradient)
    const std::vector<double> code_k(bank.codes().data().begin() + k * 3,
                                     bank.codes().data().begin() + (k + 1) * 3);
    auto commit_term = [&](const std::vector<double>& sv) {  // beta ||s - sg[C_k]||^2
        double acc = 0.0;
        for (std::size_t j = 0; j < 3; ++j) acc += (sv[j] - code_k[j]) * (sv[j] - code_k[j]);
        return beta * acc;
    };
    auto codebook_term = [&](const std::vector<double>& cv) {  // ||sg[s] - C_k||^2
        double acc = 0.0;
        for (std::size_t j = 0; j < 3; ++j) acc += (s_data[j] - cv[j]) * (s_data[j] - cv[j]);
        return acc;
    };

    const double eps = 1e-6;
    for (std::size_t j = 0; j < 3; ++j) {
        std::vector<double> plus = s_data, minus = s_data;
        plus[j] += eps;
        minus[j] -= eps;
        const double fd_s = (commit_term(plus) - commit_term(minus)) / (2.0 * eps);
        CHECK(std::abs(grad_s[j] - fd_s) <= 1e-6);
        CHECK(grad_s[j] == doctest::Approx(2.0 * beta * (s_data[j] - code_k[j])).epsilon(1e-9));

        std::vector<double> cplus = code_k, cminus = code_k;
        cplus[j] += eps;
        cminus[j] -= eps;
        const double fd_c = (codebook_term(cplus) - codebook_term(cminus)) / (2.0 * eps);
        CHECK(std::abs(grad_c[k * 3 + j] - fd_c) <= 1e-6);
        CHECK(grad_c[k * 3 + j] == doctest::Approx(2.0 * (code_k[j] - s_data[j])).epsilon(1e-9));
    }

    // zero cross-branch leakage: moving C_k does not move the commitment
    // gradient of s, and the autodiff value for s carries no codebook term
    {
        auto& codes = bank.params().get("bank.codes").value.mutable_data();
        std::vector<double> saved = codes;
        for (std::size_t j = 0; j < 3; ++j) codes[k * 3 + j] += 1e-3;  // stay in the same cell
        Tensor s2({3}, s_data, true);
        bank.params().zero_grad();
        Tensor loss2 = bank.vq_loss(s2, beta);
        backward(loss2);
        const auto& codes_now = bank.params().get("bank.codes").value.data();
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(s2.grad()[j] ==
                  doctest::Approx(2.0 * beta * (s_data[j] - codes_now[k * 3 + j])).epsilon(1e-9));
        }
        codes = saved;
    }
}

TEST_CASE("reseed_code overwrites one row") {
    EmotionBank bank(3, 2, 18);
    bank.reseed_code(1, {7.0, -7.0});
    CHECK(bank.codes().at(1, 0) == 7.0);
    CHECK(bank.codes().at(1, 1) == -7.0);
    CHECK_THROWS_AS(bank.reseed_code(5, {0.0, 0.0}), ArgumentError);
}
