#include "diffuseq/embedding.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace diffuseq;

TEST_CASE("embed shapes and lookup") {
  Rng rng(3);
  Matrix table(7, 4);
  rng.fill_normal(table);
  const Matrix e = embed(table, {1, 3, 3, 6});
  CHECK(e.rows() == 4);
  CHECK(e.cols() == 4);
  CHECK(e.row(1) == e.row(2));
  CHECK(e.row(0) == table.row(1));
  CHECK(embed(table, {}).rows() == 0);
  CHECK(embed(table, {}).cols() == 4);
  CHECK_THROWS_AS(embed(table, {7}), ContractError);
  CHECK_THROWS_AS(embed(table, {-1}), ContractError);
}

TEST_CASE("round logits are negative squared distances") {
  Rng rng(5);
  Matrix table(6, 3), z(4, 3);
  rng.fill_normal(table);
  rng.fill_normal(z);
  const Matrix l = round_logits(table, z);
  for (int i = 0; i < 4; ++i) {
    for (int v = 0; v < 6; ++v) CHECK(l(i, v) == doctest::Approx(-(z.row(i) - table.row(v)).squaredNorm()).epsilon(1e-12));
  }
}

TEST_CASE("two-token scalar softmax") {
  Matrix table(2, 1);
  table << 0.0, 2.0;
  Matrix z(1, 1);
  z << 0.5;
  const Matrix p = round_probs(table, z);
  CHECK(p(0, 0) == doctest::Approx(0.8807970779778823).epsilon(1e-12));
}

TEST_CASE("zero table gives uniform probabilities; exact row gives argmax") {
  const Matrix zero = Matrix::Zero(5, 3);
  Matrix z(2, 3);
  z << 1, 2, 3, -1, 0, 4;
  const Matrix p = round_probs(zero, z);
  for (int i = 0; i < p.size(); ++i) CHECK(p.data()[i] == doctest::Approx(0.2));

  Rng rng(9);
  Matrix table(8, 3);
  rng.fill_normal(table);
  const Matrix l = round_logits(table, Matrix(table.row(5)));
  Eigen::Index arg;
  l.row(0).maxCoeff(&arg);
  CHECK(arg == 5);
}

TEST_CASE("translation covariance of the rounding distribution") {
  Rng rng(11);
  Matrix table(5, 2), z(3, 2);
  rng.fill_normal(table);
  rng.fill_normal(z);
  RowVectorX<double> c(2);
  c << 3.5, -1.25;
  const Matrix shifted_table = table.rowwise() + c;
  const Matrix shifted_z = z.rowwise() + c;
  const Matrix a = round_probs(table, z), b = round_probs(shifted_table, shifted_z);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("decode tokens") {
  Rng rng(13);
  Matrix table(10, 4);
  rng.fill_normal(table);
  const TokenIds ids = {3, 0, 9, 9, 2};
  CHECK(decode_tokens(table, embed(table, ids)) == ids);

  const Matrix same = Matrix::Ones(4, 2);
  CHECK(decode_tokens(same, Matrix(Matrix::Random(3, 2))) == TokenIds{0, 0, 0});

  // Perturbations shorter than half the minimum pairwise gap keep the decode.
  double gap = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 10; ++i) {
    for (int j = i + 1; j < 10; ++j) gap = std::min(gap, (table.row(i) - table.row(j)).norm());
  }
  const TokenIds all = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  Matrix z = embed(table, all);
  Matrix noise(10, 4);
  rng.fill_normal(noise);
  for (int i = 0; i < 10; ++i) z.row(i) += noise.row(i).normalized() * (0.49 * gap);
  CHECK(decode_tokens(table, z) == all);
}
