#include "diffuseq/diffusion.hpp"

#include <doctest.h>

#include <cmath>

using namespace diffuseq;
using namespace diffuseq::special;

namespace {

Matrix random_table(int V, int d, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(V, d);
  rng.fill_normal(m);
  return m;
}

}  // namespace

TEST_CASE("example layout") {
  const PairedExample ex = make_example({10, 11}, {12, 13, 14}, 12);
  const TokenIds expect = {kBos, 10, 11, kSep, 12, 13, 14, kEos, kPad, kPad, kPad, kPad};
  CHECK(ex.ids == expect);
  CHECK(ex.boundary == 4);
  CHECK(ex.target_tokens() == 4);
  CHECK(ex.pad_mask[8] == 1);
  CHECK(ex.pad_mask[7] == 0);
  CHECK_THROWS_AS(make_example({10, 11}, {12, 13, 14}, 7), ConfigError);
  const PairedExample gen = make_source_layout({10, 11}, 8);
  CHECK(gen.boundary == 4);
  CHECK(gen.length() == 8);
}

TEST_CASE("sample_z0 mean and zero-variance transition") {
  const auto sched = build_sqrt_schedule(200, 1e-4);
  const Matrix table = random_table(20, 4, 1);
  const PairedExample ex = make_example({5}, {6}, 6);
  const Matrix mean = embed(table, ex.ids);
  Rng rng(2);
  constexpr int N = 10000;
  Matrix acc = Matrix::Zero(mean.rows(), mean.cols());
  for (int i = 0; i < N; ++i) acc += sample_z0(ex, table, sched, rng).z;
  acc /= N;
  const double tol = 4.0 * std::sqrt(sched.beta0() / N);
  CHECK((acc - mean).cwiseAbs().maxCoeff() < tol);

  NoiseSchedule exact = sched;
  exact.alpha_bar[0] = 1.0;
  CHECK(sample_z0(ex, table, exact, rng).z == mean);
}

TEST_CASE("q_sample anchors source rows and follows the closed form") {
  const auto sched = build_sqrt_schedule(200, 1e-4);
  const PairedExample ex = make_example({5, 6}, {7, 8}, 8);
  const Matrix table = random_table(20, 3, 3);
  Rng rng(4);
  const auto z0 = sample_z0(ex, table, sched, rng);
  const Matrix x0 = embed(table, TokenIds(ex.ids.begin(), ex.ids.begin() + ex.boundary));

  const Matrix zero = Matrix::Zero(z0.z.rows() - z0.boundary, 3);
  for (int t : {1, 100, 200}) {
    const auto zt = q_sample_with_noise(z0, x0, t, sched, zero);
    CHECK(zt.x_rows() == x0);
    CHECK((zt.y_rows() - std::sqrt(sched.alpha_bar[t]) * z0.y_rows()).cwiseAbs().maxCoeff() < 1e-15);
  }

  constexpr int N = 10000;
  for (int t : {1, 100, 200}) {
    Matrix sum = Matrix::Zero(z0.z.rows() - z0.boundary, 3), sq = sum;
    for (int i = 0; i < N; ++i) {
      const auto zt = q_sample(z0, x0, t, sched, rng);
      REQUIRE(zt.x_rows() == x0);
      sum += zt.y_rows();
      sq += zt.y_rows().cwiseProduct(zt.y_rows());
    }
    const Matrix mean = sum / N;
    const Matrix var = sq / N - mean.cwiseProduct(mean);
    const double sd = std::sqrt(1.0 - sched.alpha_bar[t]);
    CHECK((mean - std::sqrt(sched.alpha_bar[t]) * z0.y_rows()).cwiseAbs().maxCoeff() < 4.0 * sd / std::sqrt(N));
    CHECK(((var.array() / (1.0 - sched.alpha_bar[t])) - 1.0).abs().maxCoeff() < 0.05);
  }
}

TEST_CASE("anchor") {
  Rng rng(5);
  LatentState<double> st;
  st.z.resize(6, 3);
  rng.fill_normal(st.z);
  st.boundary = 2;
  CHECK(anchor(st, Matrix(st.x_rows())).z == st.z);
  Matrix x0(2, 3);
  rng.fill_normal(x0);
  const auto once = anchor(st, x0);
  CHECK(anchor(once, x0).z == once.z);
  CHECK((once.y_rows() - st.y_rows()).norm() == 0.0);
  CHECK(once.x_rows() == x0);
  CHECK_THROWS_AS(anchor(st, Matrix(3, 3)), ContractError);
}

TEST_CASE("three one-step transitions match the closed form at t=3") {
  // The chain starts at the embedding mean, so the q(z_0|w) transition is the
  // first of the steps composed into alpha_bar.
  const auto sched = build_sqrt_schedule(200, 1e-4);
  const PairedExample ex = make_example({5}, {6}, 5);
  Matrix table = Matrix::Zero(20, 1);
  table(6, 0) = 1.5;
  table(kEos, 0) = -0.5;
  Rng rng(6);
  constexpr int N = 100000;
  const Matrix mean0 = embed(table, ex.ids);
  const Matrix x0 = mean0.topRows(ex.boundary);
  double s_seq = 0.0, q_seq = 0.0, s_dir = 0.0, q_dir = 0.0;
  LatentState<double> base;
  base.z = mean0;
  base.boundary = ex.boundary;
  for (int i = 0; i < N; ++i) {
    auto z = sample_z0(ex, table, sched, rng);
    for (int k = 0; k < 3; ++k) z = q_step(z, sched, rng);
    const double a = z.z(ex.boundary, 0);
    s_seq += a;
    q_seq += a * a;
    const double b = q_sample(base, x0, 3, sched, rng).z(ex.boundary, 0);
    s_dir += b;
    q_dir += b * b;
  }
  const double m_seq = s_seq / N, m_dir = s_dir / N;
  const double v_seq = q_seq / N - m_seq * m_seq, v_dir = q_dir / N - m_dir * m_dir;
  const double ab3 = 0.8771179427255549;
  CHECK(sched.alpha_bar[3] == doctest::Approx(ab3).epsilon(1e-12));
  CHECK(m_seq == doctest::Approx(std::sqrt(ab3) * 1.5).epsilon(0.01));
  CHECK(m_dir == doctest::Approx(std::sqrt(ab3) * 1.5).epsilon(0.01));
  CHECK(v_seq == doctest::Approx(1.0 - ab3).epsilon(0.03));
  CHECK(v_dir == doctest::Approx(1.0 - ab3).epsilon(0.03));
}

TEST_CASE("posterior mean") {
  const auto sched = build_sqrt_schedule(200, 1e-4);
  Matrix zt(3, 2), z0(3, 2), expect(3, 2);
  zt << 0.5, -1.0, 2.0, 0.25, -0.75, 1.5;
  z0 << 1.0, 0.0, -0.5, 0.5, 0.25, -2.0;
  expect << 0.5066463815360164, -0.9850159631329727, 1.9629627262811804, 0.2533231907680082, -0.735227372357347,
      1.449247144760399;
  CHECK((posterior_mean(zt, z0, 50, sched) - expect).cwiseAbs().maxCoeff() < 1e-12);

  // Noise-free z_t built from z0 maps to sqrt(alpha_bar_{t-1}) z0.
  for (int t = 2; t <= 200; t += 13) {
    const Matrix noiseless = std::sqrt(sched.alpha_bar[t]) * z0;
    const Matrix m = posterior_mean(noiseless, z0, t, sched);
    CHECK((m - std::sqrt(sched.alpha_bar[t - 1]) * z0).cwiseAbs().maxCoeff() < 1e-6);
  }
  CHECK_THROWS_AS(posterior_mean(zt, Matrix(2, 2), 5, sched), ContractError);
}
