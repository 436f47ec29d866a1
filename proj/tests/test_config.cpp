#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "udsx/config.hpp"
#include "udsx/error.hpp"

using namespace udsx;

TEST_CASE("parsing flat key = value text") {
  const KeyValues kv = parse_key_values("# comment\nlambda = 5\n\n  mode=dex_only   # trailing\nepochs = 7\n");
  CHECK(kv.size() == 3);
  CHECK(kv.at("lambda") == "5");
  CHECK(kv.at("mode") == "dex_only");
  CHECK_THROWS_AS(parse_key_values("lambda 5\n"), Error);
  CHECK_THROWS_AS(parse_key_values("lambda = 5\nlambda = 6\n"), Error);
}

TEST_CASE("typed conversion") {
  KeyValues kv{{"mode", "dex_dsd"},      {"lambda", "2.5"},          {"decay_epochs", "3,9"},
               {"channels", "4,6,8"},    {"pste.layers", "0,1"},     {"pste.min_width", "2"},
               {"pste.schedule", "step"}, {"freeze_gamma", "true"},   {"optimizer", "momentum"},
               {"eval.ranks", "1,3"},     {"eval.distance", "cosine"}, {"seed", "18446744073709551615"},
               {"warmup_epochs", "2"},    {"epochs", "12"}};
  const TrainConfig c = train_config_from(kv);
  CHECK(c.mode == Mode::DexDsd);
  CHECK(c.lambda == 2.5);
  CHECK(c.decay_epochs == std::vector<int>{3, 9});
  CHECK(c.channels == std::vector<std::size_t>{4, 6, 8});
  CHECK(c.pste.schedule == PteSchedule::Step);
  CHECK(c.freeze_gamma);
  CHECK(c.optimizer == OptimizerKind::Momentum);
  CHECK(c.eval_ranks == std::vector<int>{1, 3});
  CHECK(c.eval_distance == Distance::Cosine);
  CHECK(c.seed == 18446744073709551615ULL);
  CHECK(c.total_epochs == 12);

  CHECK_THROWS_AS(train_config_from({{"lambda", "abc"}}), Error);
  CHECK_THROWS_AS(train_config_from({{"lambda", "-1"}}), Error);
  CHECK_THROWS_AS(train_config_from({{"batch_p", "-3"}}), Error);
  CHECK_THROWS_AS(train_config_from({{"freeze_gamma", "maybe"}}), Error);
  CHECK_THROWS_AS(train_config_from({{"mode", "fancy"}}), Error);

  const SynthSpec s = synth_spec_from({{"data.domains", "5"}, {"data.sigma", "0.25"}, {"lambda", "3"}});
  CHECK(s.n_domains == 5);
  CHECK(s.sigma == 0.25);
  CHECK_THROWS_AS(synth_spec_from({{"data.classes", "2"}}), Error);
}

TEST_CASE("unknown keys are rejected by name") {
  try {
    check_known_keys({{"lamda", "3"}});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
    CHECK(std::string(e.what()).find("lamda") != std::string::npos);
  }
  CHECK_NOTHROW(check_known_keys({{"lambda", "3"}, {"data.sigma", "1"}, {"out", "x"}, {"data.path", "y"}}));
}

TEST_CASE("overrides") {
  KeyValues kv{{"lambda", "1"}};
  apply_override(kv, "lambda=4");
  apply_override(kv, " mode = udsx ");
  CHECK(kv.at("lambda") == "4");
  CHECK(kv.at("mode") == "udsx");
  CHECK_THROWS_AS(apply_override(kv, "lambda"), Error);
}

TEST_CASE("resolved config round trips") {
  TrainConfig c;
  c.mode = Mode::PsteOnly;
  c.lambda = 0.125;
  c.channels = {4, 8, 8, 16, 16};
  c.csr.psi1 = 0.05;
  c.pste.per_element = true;
  const TrainConfig r = train_config_from(to_key_values(c));
  CHECK(to_key_values(r) == to_key_values(c));
  CHECK(r.csr.psi1 == 0.05);
  CHECK(r.pste.per_element);

  SynthSpec s;
  s.cell_sigma = 0.3;
  s.noise_anisotropy = 0.5;
  CHECK(to_key_values(synth_spec_from(to_key_values(s))) == to_key_values(s));

  // Every documented key is emitted.
  const KeyValues all = to_key_values(TrainConfig{});
  for (const auto& [k, help] : train_keys()) {
    CAPTURE(k);
    CHECK(all.count(k) == 1);
    CHECK_FALSE(help.empty());
  }

  const std::string text = format_key_values(to_key_values(c));
  CHECK(to_key_values(train_config_from(parse_key_values(text))) == to_key_values(c));
}

TEST_CASE("loading from disk") {
  const auto path = std::filesystem::temp_directory_path() / "udsx_test_config.conf";
  {
    std::ofstream out(path);
    out << "lambda = 9\n";
  }
  CHECK(load_key_values(path).at("lambda") == "9");
  std::filesystem::remove(path);
  try {
    load_key_values(path);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Io);
  }
}
