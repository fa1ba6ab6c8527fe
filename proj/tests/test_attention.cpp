#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "hqdet/attention.hpp"
#include "test_support.hpp"

#include <cmath>
#include <limits>

using namespace hqdet;
using hqdet::testing::bit_identical;
using hqdet::testing::max_abs_diff;
using hqdet::testing::random_tensor;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
    Mat m(t.dim(0), std::vector<double>(t.dim(1)));
    for (std::size_t i = 0; i < t.dim(0); ++i)
        for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
    return m;
}

Mat affine(const Mat& x, const Tensor& w, const Tensor& b) {
    Mat out(x.size(), std::vector<double>(w.dim(1), 0.0));
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = 0; j < w.dim(1); ++j) {
            double s = b.defined() ? b.at(j) : 0.0;
            for (std::size_t k = 0; k < w.dim(0); ++k) s += x[i][k] * w.at(k, j);
            out[i][j] = s;
        }
    return out;
}

Mat norm_rows(const Mat& x, const LayerNormParams& p) {
    Mat out = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double n = static_cast<double>(x[i].size());
        double mu = 0, var = 0;
        for (double v : x[i]) mu += v;
        mu /= n;
        for (double v : x[i]) var += (v - mu) * (v - mu);
        var /= n;
        for (std::size_t j = 0; j < x[i].size(); ++j)
            out[i][j] = (x[i][j] - mu) / std::sqrt(var + 1e-5) * p.gamma.at(j) + p.beta.at(j);
    }
    return out;
}

// Unmasked multi-head attention written with explicit loops.
Mat attention_oracle(const Mat& qin, const Mat& kvin, const AttentionParams& p, std::size_t heads) {
    Mat q = affine(qin, p.wq, p.bq), k = affine(kvin, p.wk, p.bk), v = affine(kvin, p.wv, p.bv);
    const std::size_t c = q[0].size(), d = c / heads;
    Mat out(q.size(), std::vector<double>(c, 0.0));
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < q.size(); ++i) {
            std::vector<double> logit(k.size());
            double mx = -1e300;
            for (std::size_t j = 0; j < k.size(); ++j) {
                double s = 0;
                for (std::size_t t = 0; t < d; ++t) s += q[i][h * d + t] * k[j][h * d + t];
                logit[j] = s / std::sqrt(static_cast<double>(d));
                mx = std::max(mx, logit[j]);
            }
            double z = 0;
            for (double& l : logit) z += (l = std::exp(l - mx));
            for (std::size_t j = 0; j < k.size(); ++j)
                for (std::size_t t = 0; t < d; ++t) out[i][h * d + t] += logit[j] / z * v[j][h * d + t];
        }
    return affine(out, p.wo, p.bo);
}

struct Fixture {
    AttentionConfig cfg;
    ParamStore store{7};
    AttentionParams att;
    Fixture(std::size_t c = 8, std::size_t heads = 2) {
        cfg.embed_dim = c;
        cfg.heads = heads;
        att = AttentionParams::create(store, "att", c);
        // Non-trivial norm and biases so the oracles see every term.
        for (auto& [name, t] : store.entries()) {
            Tensor tt = t;
            if (name.find(".b") != std::string::npos || name.find("beta") != std::string::npos)
                for (double& v : tt.values_mut()) v = store.rng().uniform(-0.3, 0.3);
            if (name.find("gamma") != std::string::npos)
                for (double& v : tt.values_mut()) v = store.rng().uniform(0.5, 1.5);
        }
    }
};

}  // namespace

TEST_CASE("group_mask is block diagonal and symmetric") {
    std::vector<std::size_t> sizes{2, 0, 3};
    Tensor m = group_mask(sizes);
    REQUIRE(m.shape() == Shape{5, 5});
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            const bool same = (i < 2) == (j < 2);
            CHECK((m.at(i, j) == 0.0) == same);
            CHECK(m.at(i, j) == m.at(j, i));
        }
}

TEST_CASE("group self-attention: single query attends to itself only") {
    Fixture f;
    std::mt19937_64 rng(41);
    Tensor x = random_tensor({1, 8}, rng);
    std::vector<std::size_t> sizes{1};
    Tensor y = group_self_attention(x, group_mask(sizes), f.att, f.cfg);
    Mat xn = norm_rows(to_mat(x), f.att.norm);
    Mat vproj = affine(affine(xn, f.att.wv, f.att.bv), f.att.wo, f.att.bo);
    for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(y.at(0, c) - (x.at(0, c) + vproj[0][c])) < 1e-12);
}

TEST_CASE("group self-attention: groups of one do not mix") {
    Fixture f;
    std::mt19937_64 rng(42);
    Tensor x = random_tensor({2, 8}, rng);
    std::vector<std::size_t> sizes{1, 1};
    Tensor mask = group_mask(sizes);
    Tensor y = group_self_attention(x, mask, f.att, f.cfg);
    Tensor x2 = x.detach();
    for (std::size_t c = 0; c < 8; ++c) x2.values_mut()[c] += 3.7;
    Tensor y2 = group_self_attention(x2, mask, f.att, f.cfg);
    for (std::size_t c = 0; c < 8; ++c) CHECK(y.at(1, c) == y2.at(1, c));
}

TEST_CASE("group self-attention matches per-group unmasked attention") {
    Fixture f;
    std::mt19937_64 rng(43);
    Tensor x = random_tensor({4, 8}, rng);
    std::vector<std::size_t> sizes{2, 2};
    Tensor y = group_self_attention(x, group_mask(sizes), f.att, f.cfg);
    Mat xm = to_mat(x);
    for (std::size_t g = 0; g < 2; ++g) {
        Mat part(xm.begin() + static_cast<long>(2 * g), xm.begin() + static_cast<long>(2 * g + 2));
        Mat pn = norm_rows(part, f.att.norm);
        Mat o = attention_oracle(pn, pn, f.att, 2);
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(y.at(2 * g + i, c) - (part[i][c] + o[i][c])) < 1e-12);
    }
}

TEST_CASE("group self-attention: isolation and permutation equivariance on random groups") {
    Fixture f;
    std::mt19937_64 rng(44);
    std::vector<std::size_t> sizes{3, 1, 4};
    Tensor mask = group_mask(sizes);
    Tensor x = random_tensor({8, 8}, rng);
    Tensor y = group_self_attention(x, mask, f.att, f.cfg);

    Tensor zeroed = x.detach();
    for (std::size_t i = 4; i < 8; ++i)
        for (std::size_t c = 0; c < 8; ++c) zeroed.values_mut()[i * 8 + c] = 0.0;
    Tensor yz = group_self_attention(zeroed, mask, f.att, f.cfg);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t c = 0; c < 8; ++c) CHECK(yz.at(i, c) == y.at(i, c));

    std::vector<std::size_t> perm{2, 0, 1, 3, 7, 5, 4, 6};
    Tensor yp = group_self_attention(gather_rows(x, perm), mask, f.att, f.cfg);
    Tensor expect = gather_rows(y, perm);
    CHECK(max_abs_diff(yp.values(), expect.values()) < 1e-12);
}

TEST_CASE("group self-attention: a zero-size mask row is a contract violation") {
    Fixture f;
    Tensor mask({1, 1}, {-std::numeric_limits<double>::infinity()});
    CHECK_THROWS_AS((void)group_self_attention(Tensor::zeros({1, 8}), mask, f.att, f.cfg), ContractError);
}

namespace {

struct CrossFixture {
    AttentionConfig cfg;
    ParamStore store{9};
    DeformableParams dp;
    CrossFixture(std::size_t points, double stride = 2.0) {
        cfg.embed_dim = 8;
        cfg.heads = 2;
        cfg.points = points;
        cfg.feature_stride = stride;
        dp = DeformableParams::create(store, "ca", cfg);
    }
    void randomize_sampling(double offset_scale) {
        for (auto* t : {&dp.w_offset, &dp.b_offset})
            for (double& v : t->values_mut()) v = store.rng().uniform(-offset_scale, offset_scale);
        for (auto* t : {&dp.w_weight, &dp.b_weight})
            for (double& v : t->values_mut()) v = store.rng().uniform(-1, 1);
    }
};

}  // namespace

TEST_CASE("group cross-attention: zero offsets, one point, identity output projection") {
    CrossFixture f(1, 1.0);
    std::fill(f.dp.wo.values_mut().begin(), f.dp.wo.values_mut().end(), 0.0);
    for (std::size_t i = 0; i < 8; ++i) f.dp.wo.values_mut()[i * 8 + i] = 1.0;
    std::mt19937_64 rng(45);
    Tensor fm = random_tensor({5, 6, 8}, rng);
    Tensor q = random_tensor({1, 8}, rng);
    MappingMatrix mapping(1, 1, {{0, 0}});
    std::vector<double> ref{3.5, 2.5};  // pixel center of cell (row 2, col 3)
    std::vector<Tensor> fms{fm};
    Tensor y = group_cross_attention(q, ref, fms, mapping, f.dp, f.cfg);
    Mat cell(1, std::vector<double>(8));
    for (std::size_t c = 0; c < 8; ++c) cell[0][c] = fm.at(2, 3, c);
    Mat v = affine(cell, f.dp.w_value, f.dp.b_value);
    for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(y.at(0, c) - (q.at(0, c) + v[0][c])) < 1e-12);
}

TEST_CASE("group cross-attention: camera isolation") {
    CrossFixture f(4);
    f.randomize_sampling(3.0);
    std::mt19937_64 rng(46);
    MappingMatrix mapping(3, 2, {{0, 0}, {0, 2}, {1, 1}});
    std::vector<double> ref{4, 3, 10, 6, 7, 7};
    Tensor q = random_tensor({3, 8}, rng);
    std::vector<Tensor> fms{random_tensor({6, 8, 8}, rng), random_tensor({6, 8, 8}, rng)};
    Tensor y = group_cross_attention(q, ref, fms, mapping, f.dp, f.cfg);
    std::vector<Tensor> changed{fms[0], random_tensor({6, 8, 8}, rng)};
    Tensor y2 = group_cross_attention(q, ref, changed, mapping, f.dp, f.cfg);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t c = 0; c < 8; ++c) CHECK(y.at(i, c) == y2.at(i, c));

    std::vector<Tensor> missing{fms[0]};
    CHECK_THROWS_AS((void)group_cross_attention(q, ref, missing, mapping, f.dp, f.cfg), UsageError);
}

TEST_CASE("group cross-attention matches an explicit loop oracle with four points") {
    CrossFixture f(4);
    f.randomize_sampling(2.0);
    std::mt19937_64 rng(47);
    MappingMatrix mapping(2, 2, {{0, 0}, {0, 1}, {1, 1}});
    std::vector<double> ref{4.2, 3.1, 9.7, 6.3, 2.0, 8.5};
    Tensor q = random_tensor({3, 8}, rng);
    std::vector<Tensor> fms{random_tensor({6, 8, 8}, rng), random_tensor({6, 8, 8}, rng)};
    Tensor y = group_cross_attention(q, ref, fms, mapping, f.dp, f.cfg);

    const std::size_t H = 2, P = 4, C = 8, d = 4;
    Mat xn = norm_rows(to_mat(q), f.dp.norm);
    Mat off = affine(xn, f.dp.w_offset, f.dp.b_offset);
    Mat logit = affine(xn, f.dp.w_weight, f.dp.b_weight);
    Mat combined(3, std::vector<double>(C, 0.0));
    for (std::size_t j = 0; j < 3; ++j) {
        const Tensor& fm = fms[mapping.columns()[j].camera];
        Mat flat(fm.dim(0) * fm.dim(1), std::vector<double>(C));
        for (std::size_t r = 0; r < flat.size(); ++r)
            for (std::size_t c = 0; c < C; ++c) flat[r][c] = fm.values()[r * C + c];
        Mat val = affine(flat, f.dp.w_value, f.dp.b_value);
        std::vector<double> vflat;
        for (const auto& row : val) vflat.insert(vflat.end(), row.begin(), row.end());
        Tensor value({fm.dim(0), fm.dim(1), C}, vflat);
        for (std::size_t h = 0; h < H; ++h) {
            double mx = -1e300, z = 0;
            for (std::size_t p = 0; p < P; ++p) mx = std::max(mx, logit[j][h * P + p]);
            std::vector<double> w(P);
            for (std::size_t p = 0; p < P; ++p) z += (w[p] = std::exp(logit[j][h * P + p] - mx));
            for (std::size_t p = 0; p < P; ++p) {
                const std::size_t s = h * P + p;
                const double u = (ref[2 * j] + off[j][2 * s]) / 2.0 - 0.5;
                const double v = (ref[2 * j + 1] + off[j][2 * s + 1]) / 2.0 - 0.5;
                Tensor sample = bilinear_sample(value, Tensor({1, 2}, {u, v}));
                for (std::size_t t = 0; t < d; ++t) combined[j][h * d + t] += w[p] / z * sample.at(0, h * d + t);
            }
        }
    }
    Mat out = affine(combined, f.dp.wo, f.dp.bo);
    for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t c = 0; c < C; ++c) CHECK(std::abs(y.at(j, c) - (q.at(j, c) + out[j][c])) < 1e-12);
}

TEST_CASE("temporal cross-attention: empty memory, single row, dense oracle") {
    Fixture f;
    std::mt19937_64 rng(48);
    Tensor q = random_tensor({3, 8}, rng);
    CHECK(bit_identical(temporal_cross_attention(q, Tensor::zeros({0, 8}), f.att, f.cfg), q));
    CHECK(bit_identical(temporal_cross_attention(q, Tensor(), f.att, f.cfg), q));

    Tensor m1 = random_tensor({1, 8}, rng);
    Tensor y1 = temporal_cross_attention(q, m1, f.att, f.cfg);
    Mat vproj = affine(affine(to_mat(m1), f.att.wv, f.att.bv), f.att.wo, f.att.bo);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(y1.at(i, c) - (q.at(i, c) + vproj[0][c])) < 1e-12);

    Tensor mem = random_tensor({5, 8}, rng);
    Tensor y = temporal_cross_attention(q, mem, f.att, f.cfg);
    Mat o = attention_oracle(norm_rows(to_mat(q), f.att.norm), to_mat(mem), f.att, 2);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(y.at(i, c) - (q.at(i, c) + o[i][c])) < 1e-12);
}

TEST_CASE("attention blocks pass finite-difference checks") {
    std::mt19937_64 rng(49);
    Fixture f;
    std::vector<std::size_t> sizes{2, 3};
    Tensor mask = group_mask(sizes);
    Tensor probe = random_tensor({5, 8}, rng);
    auto dot = [&](const Tensor& y) { return sum(mul(y, probe)); };
    CHECK(finite_diff_check([&](const Tensor& x) { return dot(group_self_attention(x, mask, f.att, f.cfg)); },
                            random_tensor({5, 8}, rng)) < 1e-4);
    Tensor mem = random_tensor({4, 8}, rng);
    CHECK(finite_diff_check([&](const Tensor& x) { return dot(temporal_cross_attention(x, mem, f.att, f.cfg)); },
                            random_tensor({5, 8}, rng)) < 1e-4);
    CHECK(finite_diff_check([&](const Tensor& m) { return dot(temporal_cross_attention(probe, m, f.att, f.cfg)); },
                            mem) < 1e-4);

    ParamStore fs(3);
    FeedForwardParams ffn = FeedForwardParams::create(fs, "ffn", 8, 16);
    CHECK(finite_diff_check([&](const Tensor& x) { return dot(feed_forward(x, ffn)); }, random_tensor({5, 8}, rng)) <
          1e-4);

    CrossFixture cf(4);
    cf.randomize_sampling(1.5);
    MappingMatrix mapping(3, 2, {{0, 0}, {0, 2}, {1, 1}});
    std::vector<double> ref{4.3, 3.2, 10.1, 6.6, 7.4, 7.7};
    std::vector<Tensor> fms{random_tensor({6, 8, 8}, rng), random_tensor({6, 8, 8}, rng)};
    Tensor probe3 = random_tensor({3, 8}, rng);
    CHECK(finite_diff_check(
              [&](const Tensor& x) {
                  return sum(mul(group_cross_attention(x, ref, fms, mapping, cf.dp, cf.cfg), probe3));
              },
              random_tensor({3, 8}, rng)) < 1e-4);

    // Parameter gradients, including the sampling offsets and feature maps.
    Tensor q = random_tensor({3, 8}, rng);
    std::vector<Tensor> params{cf.dp.w_offset, cf.dp.b_offset, cf.dp.w_weight, cf.dp.w_value, cf.dp.wo, fms[0]};
    CHECK(finite_diff_check(
              [&]() { return sum(mul(group_cross_attention(q, ref, fms, mapping, cf.dp, cf.cfg), probe3)); }, params,
              1e-5, 40, 5) < 1e-4);
}
