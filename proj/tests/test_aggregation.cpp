#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "hqdet/aggregation.hpp"
#include "test_support.hpp"

#include <cmath>
#include <numbers>

using namespace hqdet;
using hqdet::testing::max_abs_diff;
using hqdet::testing::random_tensor;

namespace {

struct Fixture {
    AttentionConfig cfg;
    ParamStore store{11};
    AggregationParams agg;
    Fixture() {
        cfg.embed_dim = 8;
        cfg.heads = 2;
        agg = AggregationParams::create(store, "agg", 8);
    }
    void force_gate(double bias) {
        std::fill(agg.gate.w2.values_mut().begin(), agg.gate.w2.values_mut().end(), 0.0);
        std::fill(agg.gate.b2.values_mut().begin(), agg.gate.b2.values_mut().end(), bias);
    }
};

double gelu_ref(double x) {
    const double k = std::sqrt(2.0 / std::numbers::pi);
    return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

}  // namespace

TEST_CASE("gate: saturated MLP gives identity and zero") {
    Fixture f;
    std::mt19937_64 rng(51);
    Tensor q = random_tensor({4, 8}, rng);
    std::vector<unsigned char> bits{0, 1, 1, 0};
    f.force_gate(800.0);
    CHECK(hqdet::testing::bit_identical(gate_truncation(q, bits, f.agg.gate), q));
    f.force_gate(-800.0);
    Tensor closed = gate_truncation(q, bits, f.agg.gate);
    for (double v : closed.values()) CHECK(v == 0.0);
}

TEST_CASE("gate: truncation bit changes the output exactly as the explicit MLP says") {
    Fixture f;
    std::mt19937_64 rng(52);
    Tensor q = random_tensor({1, 8}, rng);
    const auto& g = f.agg.gate;
    for (int bit = 0; bit <= 1; ++bit) {
        std::vector<unsigned char> bits{static_cast<unsigned char>(bit)};
        Tensor y = gate_truncation(q, bits, g);
        std::vector<double> in(q.values().begin(), q.values().end());
        in.push_back(bit);
        std::vector<double> hidden(8), gate(8);
        for (std::size_t j = 0; j < 8; ++j) {
            double s = g.b1.at(j);
            for (std::size_t k = 0; k < 9; ++k) s += in[k] * g.w1.at(k, j);
            hidden[j] = gelu_ref(s);
        }
        for (std::size_t j = 0; j < 8; ++j) {
            double s = g.b2.at(j);
            for (std::size_t k = 0; k < 8; ++k) s += hidden[k] * g.w2.at(k, j);
            gate[j] = 1.0 / (1.0 + std::exp(-s));
            CHECK(std::abs(y.at(0, j) - q.at(0, j) * gate[j]) < 1e-12);
            CHECK(gate[j] > 0.0);
            CHECK(gate[j] < 1.0);
        }
    }
    std::vector<unsigned char> zero{0}, one{1};
    CHECK(max_abs_diff(gate_truncation(q, zero, g).values(), gate_truncation(q, one, g).values()) > 1e-6);
}

TEST_CASE("fuse: mean of owned rows, zero row for queries without 2D queries") {
    Tensor x({3, 2}, {1, 2, 3, 4, 5, 6});
    MappingMatrix m(3, 2, {{0, 0}, {0, 1}, {1, 0}});
    // owners [0,1,0]: row 0 = mean(a, c), row 1 = b, row 2 = 0.
    Tensor y = fuse(x, m);
    CHECK(y.at(0, 0) == 3.0);
    CHECK(y.at(0, 1) == 4.0);
    CHECK(y.at(1, 0) == 3.0);
    CHECK(y.at(1, 1) == 4.0);
    CHECK(y.at(2, 0) == 0.0);
    CHECK(y.at(2, 1) == 0.0);

    Tensor x2({3, 1}, {1.0, 3.0, 7.0});
    MappingMatrix m3(2, 2, {{0, 0}, {1, 0}, {1, 1}});
    Tensor y3 = fuse(x2, m3);
    CHECK(y3.at(0, 0) == 2.0);
    CHECK(y3.at(1, 0) == 7.0);
}

TEST_CASE("fuse matches the dense T X / rowsum oracle and is linear") {
    std::mt19937_64 rng(53);
    Rng pick(53);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = 6, v = 3;
        std::vector<MappingColumn> cols;
        for (std::size_t cam = 0; cam < v; ++cam)
            for (std::size_t i = 0; i < n; ++i)
                if (pick.uniform() < 0.5) cols.push_back({cam, i});
        MappingMatrix m(n, v, cols);
        Tensor x = random_tensor({cols.size(), 4}, rng);
        std::vector<std::vector<double>> dense(n, std::vector<double>(cols.size(), 0.0));
        for (std::size_t j = 0; j < cols.size(); ++j) dense[cols[j].query][j] = 1.0;
        Tensor y = fuse(x, m);
        for (std::size_t i = 0; i < n; ++i) {
            double rowsum = 0;
            for (double t : dense[i]) rowsum += t;
            for (std::size_t c = 0; c < 4; ++c) {
                double s = 0;
                for (std::size_t j = 0; j < cols.size(); ++j) s += dense[i][j] * x.at(j, c);
                CHECK(std::abs(y.at(i, c) - (rowsum > 0 ? s / rowsum : 0.0)) < 1e-12);
            }
        }
        Tensor ys = fuse(scale(x, -2.5), m);
        CHECK(max_abs_diff(ys.values(), scale(y, -2.5).values()) < 1e-12);
    }
}

TEST_CASE("allocation/aggregation round trip with a unit gate") {
    Fixture f;
    f.force_gate(800.0);
    std::mt19937_64 rng(54);
    MappingMatrix m(4, 3, {{0, 0}, {0, 1}, {0, 3}, {1, 1}, {1, 2}, {2, 1}, {2, 3}});
    Tensor q3d = random_tensor({4, 8}, rng);
    Tensor q2d = m.gather(q3d);
    std::vector<unsigned char> bits{0, 1, 0, 1, 0, 0, 1};
    Tensor fused = fuse(gate_truncation(q2d, bits, f.agg.gate), m);
    CHECK(max_abs_diff(fused.values(), q3d.values()) < 1e-12);
}

TEST_CASE("merge: zero fusion, single query and compositional oracle") {
    Fixture f;
    std::mt19937_64 rng(55);
    Tensor q3d = random_tensor({5, 8}, rng);
    Tensor plain = self_attention(q3d, Tensor(), f.agg.merge, f.cfg);
    CHECK(hqdet::testing::bit_identical(merge(q3d, Tensor::zeros({5, 8}), f.agg.merge, f.cfg), plain));

    Tensor one = random_tensor({1, 8}, rng), fz = random_tensor({1, 8}, rng);
    Tensor y1 = merge(one, fz, f.agg.merge, f.cfg);
    Tensor x = add(one, fz);
    Tensor expect = add(x, linear(linear(f.agg.merge.norm(x), f.agg.merge.wv, f.agg.merge.bv), f.agg.merge.wo,
                                  f.agg.merge.bo));
    CHECK(max_abs_diff(y1.values(), expect.values()) < 1e-12);

    Tensor fused = random_tensor({5, 8}, rng);
    Tensor got = merge(q3d, fused, f.agg.merge, f.cfg);
    Tensor sumx = add(q3d, fused);
    Tensor n = layer_norm(sumx, f.agg.merge.norm.gamma, f.agg.merge.norm.beta);
    const auto& p = f.agg.merge;
    Tensor qh = split_heads(linear(n, p.wq, p.bq), 2), kh = split_heads(linear(n, p.wk, p.bk), 2),
           vh = split_heads(linear(n, p.wv, p.bv), 2);
    Tensor att = softmax(scale(matmul(qh, transpose(kh)), 0.5));
    Tensor step = add(sumx, linear(merge_heads(matmul(att, vh)), p.wo, p.bo));
    CHECK(max_abs_diff(got.values(), step.values()) < 1e-12);

    Tensor no_res = merge(q3d, fused, f.agg.merge, f.cfg, false);
    CHECK(max_abs_diff(add(no_res, sumx).values(), got.values()) < 1e-12);
}

TEST_CASE("aggregate: gradients flow through gate, fuse and merge") {
    Fixture f;
    std::mt19937_64 rng(56);
    MappingMatrix m(4, 2, {{0, 0}, {0, 2}, {1, 0}, {1, 1}});
    std::vector<unsigned char> bits{0, 1, 1, 0};
    Tensor q3d = random_tensor({4, 8}, rng);
    Tensor q2d = random_tensor({4, 8}, rng);
    Tensor probe = random_tensor({4, 8}, rng);
    auto loss = [&](const Tensor& a, const Tensor& b) {
        AggregationOutput out = aggregate(a, b, bits, m, f.agg, f.cfg);
        for (std::size_t c = 0; c < 8; ++c) CHECK(out.fused.at(3, c) == 0.0);
        return sum(mul(out.q3d_agg, probe));
    };
    CHECK(finite_diff_check([&](const Tensor& x) { return loss(q3d, x); }, q2d) < 1e-4);
    CHECK(finite_diff_check([&](const Tensor& x) { return loss(x, q2d); }, q3d) < 1e-4);
    std::vector<Tensor> params{f.agg.gate.w1, f.agg.gate.b2, f.agg.merge.wq, f.agg.merge.wv};
    CHECK(finite_diff_check([&]() { return loss(q3d, q2d); }, params, 1e-5, 30, 3) < 1e-4);
}

TEST_CASE("aggregate with no 2D queries reduces to self-attention") {
    Fixture f;
    std::mt19937_64 rng(57);
    MappingMatrix m(3, 2, {});
    Tensor q3d = random_tensor({3, 8}, rng);
    std::vector<unsigned char> none;
    AggregationOutput out = aggregate(q3d, Tensor::zeros({0, 8}), none, m, f.agg, f.cfg);
    for (double v : out.fused.values()) CHECK(v == 0.0);
    CHECK(hqdet::testing::bit_identical(out.q3d_agg, self_attention(q3d, Tensor(), f.agg.merge, f.cfg)));
}
