// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <set>

#include "flexcare/model.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace flexcare;

TEST_CASE("parameter inventory") {
  const auto cfg = fx::tiny_config(8, 2, 3, 2);
  Model<double> m(cfg, fx::two_tasks(), 1);
  const auto shapes = param_shapes(cfg, m.tasks());
  REQUIRE(m.params().size() == shapes.size());
  std::set<std::string> names(m.params().names().begin(), m.params().names().end());
  REQUIRE(names.size() == shapes.size());
  REQUIRE(m.params().value("tokens.comb").rows() == 7);
  REQUIRE(m.params().value("embed.image.pos").rows() == 4);
  REQUIRE(m.params().value("moe.expert.0.w1").cols() == 16);
  REQUIRE(m.params().value("head.B.weight").rows() == 16);
  REQUIRE(m.params().value("head.B.weight").cols() == 3);
  REQUIRE(m.params().value("encoder.1.ln2.gain") == Matrix<double>(1, 8, 1.0));
  REQUIRE(m.params().value("fusion.ln.bias") == Matrix<double>(1, 8));
}

TEST_CASE("same seed same weights") {
  const auto cfg = fx::tiny_config();
  Model<double> a(cfg, fx::two_tasks(), 5), b(cfg, fx::two_tasks(), 5), c(cfg, fx::two_tasks(), 6);
  for (std::size_t i = 0; i < a.params().size(); ++i) REQUIRE(a.params().value(i) == b.params().value(i));
  REQUIRE_FALSE(a.params().value("moe.router.w1") == c.params().value("moe.router.w1"));
}

TEST_CASE("adopting a parameter store checks names and shapes") {
  const auto cfg = fx::tiny_config();
  Model<double> a(cfg, fx::two_tasks(), 5);
  REQUIRE_NOTHROW(Model<double>(cfg, fx::two_tasks(), a.params()));
  ParamStore<double> wrong;
  REQUIRE_THROWS_AS(Model<double>(cfg, fx::two_tasks(), wrong), std::invalid_argument);
  auto bigger = cfg;
  bigger.d = 16;
  REQUIRE_THROWS_AS(Model<double>(bigger, fx::two_tasks(), a.params()), std::invalid_argument);
}

TEST_CASE("config validation names the field") {
  auto cfg = fx::tiny_config();
  cfg.heads = 3;
  REQUIRE_THROWS_WITH(cfg.validate(), Catch::Matchers::ContainsSubstring("model.heads"));
  cfg = fx::tiny_config();
  cfg.top_k = 4;
  REQUIRE_THROWS_WITH(cfg.validate(), Catch::Matchers::ContainsSubstring("model.top_k"));
  cfg = fx::tiny_config();
  cfg.patch = 3;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("ablation presets") {
  ModelConfig c;
  apply_ablation(c, "a-");
  REQUIRE((!c.use_combination_tokens && !c.use_decorrelation && !c.use_moe));
  apply_ablation(c, "b-");
  REQUIRE((c.use_combination_tokens && !c.use_decorrelation && !c.use_moe));
  apply_ablation(c, "c-");
  REQUIRE((c.use_combination_tokens && c.use_decorrelation && !c.use_moe));
  apply_ablation(c, "d-");
  REQUIRE((c.use_combination_tokens && !c.use_decorrelation && c.use_moe));
  apply_ablation(c, "");
  REQUIRE((c.use_combination_tokens && c.use_decorrelation && c.use_moe));
  REQUIRE_THROWS_AS(apply_ablation(c, "e-"), ConfigError);
}

TEST_CASE("forward pass structure") {
  const auto cfg = fx::tiny_config(8, 1, 4, 2);
  Model<double> m(cfg, fx::two_tasks(), 2);
  std::mt19937_64 rng(3);
  for (unsigned p = 1; p < 8; ++p) {
    const auto x = fx::random_input(cfg, p, rng);
    Tape<double> t;
    const Label y{{1}};
    const auto r = m.forward(t, nullptr, x, 0, &y, ForwardOptions{0.3});
    const std::size_t n = enumerate_combinations(ModalitySet(p)).size();
    REQUIRE(r.combinations.size() == n);
    REQUIRE(r.routing.size() == n);
    REQUIRE(t.value(r.fusion.alpha).cols() == n);
    const double obj = t.scalar(*r.objective);
    REQUIRE(obj == Catch::Approx(t.scalar(*r.pred_loss) + 0.3 * t.scalar(r.cov_reg)).epsilon(1e-14));
    if (n == 1) REQUIRE(t.scalar(r.cov_reg) == 0.0);
    for (const auto& route : r.routing) REQUIRE(route.record.expert_ids.size() == 2);
  }
}

TEST_CASE("ablated forward passes") {
  std::mt19937_64 rng(4);
  for (const char* code : {"a-", "b-", "c-", "d-"}) {
    auto cfg = fx::tiny_config(8, 1, 3, 2);
    apply_ablation(cfg, code);
    Model<double> m(cfg, fx::two_tasks(), 7);
    const auto x = fx::random_input(cfg, 7, rng);
    Tape<double> t;
    const auto r = m.forward(t, nullptr, x, 1);
    REQUIRE(r.combinations.size() == 7);
    REQUIRE(r.layout.n_comb() == (cfg.use_combination_tokens ? 7u : 0u));
    REQUIRE(r.routing.size() == (cfg.use_moe ? 7u : 0u));
    if (!cfg.use_decorrelation) REQUIRE(t.scalar(r.cov_reg) == 0.0);
    for (double p : m.infer(x, 1)) REQUIRE((p > 0.0 && p < 1.0));
  }
}

TEST_CASE("mean-pooled stand-ins without combination tokens") {
  auto cfg = fx::tiny_config(8, 1, 3, 2);
  apply_ablation(cfg, "a-");
  Model<double> m(cfg, fx::two_tasks(), 8);
  std::mt19937_64 rng(5);
  const auto x = fx::random_input(cfg, 3, rng);  // t and i
  Tape<double> t;
  const auto r = m.forward(t, nullptr, x, 0);
  const auto& z = t.value(*r.z_comb);
  const auto& ts = t.value(*r.encoded.modality_outputs[0]);
  const auto& im = t.value(*r.encoded.modality_outputs[1]);
  for (std::size_t j = 0; j < cfg.d; ++j) {
    double a = 0, b = 0;
    for (std::size_t k = 0; k < ts.rows(); ++k) a += ts(k, j);
    for (std::size_t k = 0; k < im.rows(); ++k) b += im(k, j);
    REQUIRE(z(0, j) == Catch::Approx(a / double(ts.rows())).epsilon(1e-12));
    REQUIRE(z(1, j) == Catch::Approx(b / double(im.rows())).epsilon(1e-12));
    REQUIRE(z(2, j) == Catch::Approx((a + b) / double(ts.rows() + im.rows())).epsilon(1e-12));
  }
}

TEST_CASE("absent combinations take no fusion weight") {
  const auto cfg = fx::tiny_config(8, 1, 3, 2);
  Model<double> m(cfg, fx::two_tasks(), 9);
  std::mt19937_64 rng(6);
  const auto x = fx::random_input(cfg, 5, rng);  // t and n
  Tape<double> t;
  const auto r = m.forward(t, nullptr, x, 0);
  REQUIRE(r.combinations.size() == 3);
  for (const auto& c : r.combinations) REQUIRE_FALSE(c.contains(Modality::image));
  const auto& a = t.value(r.fusion.alpha);
  REQUIRE(a[0] + a[1] + a[2] == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("input validation") {
  const auto cfg = fx::tiny_config();
  Model<double> m(cfg, fx::two_tasks(), 10);
  SampleInput<double> none;
  REQUIRE_THROWS_AS(m.infer(none, 0), std::invalid_argument);
  SampleInput<double> bad_img;
  bad_img.modality[1] = Matrix<double>(3, 4);
  REQUIRE_THROWS_AS(m.infer(bad_img, 0), ShapeError);
  std::mt19937_64 rng(1);
  REQUIRE_THROWS_AS(m.infer(fx::random_input(cfg, 1, rng), 5), UnknownTaskError);
}

TEST_CASE("float and double forward agree") {
  const auto cfg = fx::tiny_config(8, 2, 3, 2);
  Model<double> md(cfg, fx::two_tasks(), 11);
  Model<float> mf(cfg, fx::two_tasks(), md.params().cast<float>());
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 10; ++rep) {
    const auto x = fx::random_input(cfg, 7, rng);
    SampleInput<float> xf;
    for (std::size_t k = 0; k < 3; ++k) xf.modality[k] = x.modality[k]->cast<float>();
    const auto pd = md.infer(x, 1);
    const auto pf = mf.infer(xf, 1);
    for (std::size_t j = 0; j < pd.size(); ++j) REQUIRE(std::abs(pd[j] - double(pf[j])) < 1e-4);
  }
}
