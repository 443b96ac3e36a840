#include "diffuseq/metrics.hpp"
#include "diffuseq/tokenizer.hpp"

#include <doctest.h>

#include <cmath>

using namespace diffuseq;
using namespace diffuseq::metrics;

namespace {
Tokens tok(const std::string& s) { return split_whitespace(s); }
}  // namespace

TEST_CASE("bleu identity and empty hypothesis") {
  CHECK(bleu(tok("a b c d e"), {tok("a b c d e")}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(bleu(tok("x"), {tok("x")}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(bleu({}, {tok("a b")}) == 0.0);
}

TEST_CASE("bleu with no shared tokens sits at the smoothing floor") {
  const Tokens h = tok("a b c d e f g h i j");
  const Tokens r = tok("k l m n o p q r s t");
  const double expected = std::pow(0.1 / 10.1 * 0.1 / 9.1 * 0.1 / 8.1 * 0.1 / 7.1, 0.25);
  CHECK(std::abs(bleu(h, {r}) - 0.011727986748186987) < 1e-9);
  CHECK(std::abs(bleu(h, {r}) - expected) < 1e-12);
  CHECK(bleu(h, {r}) < 0.05);
}

TEST_CASE("bleu short hypothesis skips missing orders and applies brevity penalty") {
  CHECK(std::abs(bleu(tok("a b c"), {tok("a b c d")}) - 0.7165313105737893) < 1e-9);
}

TEST_CASE("bleu closest reference length") {
  // c = 4, references of length 3 and 5 are equally close; the shorter wins so BP = 1.
  CHECK(bleu(tok("a b c d"), {tok("a b c"), tok("a b c d e")}) == doctest::Approx(1.0));
}

TEST_CASE("bleu is invariant to consistent relabeling") {
  const double a = bleu(tok("a b c a d"), {tok("a b d c a")});
  const double b = bleu(tok("x y z x w"), {tok("x y w z x")});
  CHECK(a == doctest::Approx(b).epsilon(1e-15));
}

TEST_CASE("rouge-l") {
  CHECK(rouge_l(tok("a b c"), tok("a b c")) == doctest::Approx(1.0));
  CHECK(rouge_l(tok("a b"), tok("c d")) == 0.0);
  CHECK(std::abs(rouge_l(tok("a c e"), tok("a b c d e")) - 0.75) < 1e-9);
  CHECK(rouge_l({}, tok("a")) == 0.0);
  CHECK(lcs_length(tok("a c e b"), tok("a b c d e")) == lcs_length(tok("a b c d e"), tok("a c e b")));
}

TEST_CASE("dist-1") {
  CHECK(dist1(tok("a b c")) == 1.0);
  CHECK(std::abs(dist1(tok("a a b")) - 2.0 / 3.0) < 1e-9);
  CHECK(dist1(tok("a")) == 1.0);
}

TEST_CASE("self-bleu") {
  CHECK(self_bleu({tok("a b c d"), tok("a b c d"), tok("a b c d")}) == doctest::Approx(1.0));
  CHECK(self_bleu({tok("a b c d")}) == 0.0);
  const double disjoint = self_bleu({tok("a b c d e f g h i j"), tok("k l m n o p q r s t")});
  CHECK(std::abs(disjoint - 0.011727986748186987) < 1e-9);
  const double dup = self_bleu({tok("a b c d"), tok("a b c d"), tok("e f g h")});
  const double rep = self_bleu({tok("a b c d"), tok("i j k l"), tok("e f g h")});
  CHECK(rep <= dup);
}

TEST_CASE("div-4") {
  CHECK(std::abs(div4({tok("a b c d e"), tok("a b c d e")}) - 0.5) < 1e-9);
  CHECK(div4({tok("a b c d"), tok("e f g h")}) == 1.0);
  CHECK(div4({tok("a b"), tok("c")}) == 1.0);
}
