#include "opendg/engine.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace opendg;
namespace fs = std::filesystem;

namespace {

// 2-class linearly separable color blobs: red-dominant vs blue-dominant.
data::Dataset color_blobs(int per_class, std::uint64_t seed) {
  Rng rng(seed);
  data::Dataset ds;
  ds.num_classes = 2;
  for (int k = 0; k < 2; ++k)
    for (int i = 0; i < per_class; ++i) {
      data::Sample s;
      s.image = Image(3, 16, 16);
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 16; ++y)
          for (int x = 0; x < 16; ++x) {
            const double base = (c == (k == 0 ? 0 : 2)) ? 0.8 : 0.2;
            s.image.at(c, y, x) =
                std::clamp(base + rng.normal(0.0, 0.05), 0.0, 1.0);
          }
      s.label = k;
      s.domain = 0;
      s.id = "blob_" + std::to_string(k) + "_" + std::to_string(i);
      ds.samples.push_back(std::move(s));
    }
  return ds;
}

engine::PreparedData tiny_track(int num_classes, int per_class, int image_size,
                                std::uint64_t seed) {
  data::SyntheticDomainSpec spec;
  spec.image_size = image_size;
  spec.num_classes = num_classes;
  spec.seed = seed;
  data::Dataset ds = data::generate_synthetic_domains(spec, 1, per_class);
  data::PreprocessConfig pre;
  pre.target_size = image_size;
  pre.mean_rgb = {0.5, 0.5, 0.5};
  pre.std_rgb = {0.5, 0.5, 0.5};
  return engine::prepare(ds, pre);
}

double train_accuracy(engine::Model& model, const engine::PreparedData& data) {
  engine::EvalReport rep = engine::evaluate(model, data);
  return rep.acc_k;
}

}  // namespace

TEST_SUITE("engine") {

TEST_CASE("h-score on the reference operating point and its properties") {
  CHECK(engine::h_score(73.96, 83.91) == doctest::Approx(78.62).epsilon(0.0002));
  Rng rng(1);
  for (int trial = 0; trial < 2000; ++trial) {
    const double a = rng.uniform(0.0, 100.0);
    const double b = rng.uniform(0.0, 100.0);
    const double hs = engine::h_score(a, b);
    CHECK(engine::h_score(a, a) == doctest::Approx(a));
    CHECK(engine::h_score(a, 0.0) == doctest::Approx(0.0));
    CHECK(hs <= 2.0 * std::min(a, b) + 1e-9);
    CHECK(hs <= std::max(a, b) + 1e-9);
  }
}

TEST_CASE("erm training reaches full accuracy on separable blobs") {
  data::PreprocessConfig pre;
  pre.target_size = 16;
  pre.mean_rgb = {0.5, 0.5, 0.5};
  pre.std_rgb = {0.5, 0.5, 0.5};
  engine::PreparedData train_data = engine::prepare(color_blobs(12, 5), pre);

  engine::Model model = engine::make_model(backbone::SplitDepth::Toy, 2, true, 3);
  engine::TrainConfig cfg;
  cfg = engine::erm_config(cfg);
  cfg.learning_rate = 0.01;
  cfg.epochs = 10;  // 24 triplets, batch 8 -> 3 steps/epoch -> 30 steps
  cfg.batch_size = 8;
  cfg.seed = 17;
  engine::TrainResult res = engine::train(model, train_data, cfg);
  CHECK(res.steps == 30);
  CHECK(train_accuracy(model, train_data) == doctest::Approx(100.0));
}

TEST_CASE("loss history carries exactly three components per step") {
  engine::PreparedData data = tiny_track(3, 3, 12, 21);
  engine::Model model = engine::make_model(backbone::SplitDepth::Toy, 3, true, 4);
  engine::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = 9;
  engine::TrainResult res = engine::train(model, data, cfg);
  CHECK(res.steps > 0);
  CHECK(res.history.size() == static_cast<std::size_t>(res.steps) * 3);
  for (std::size_t i = 0; i < res.history.size(); i += 3) {
    CHECK(res.history[i].component == "ce");
    CHECK(res.history[i + 1].component == "disc");
    CHECK(res.history[i + 2].component == "sm");
  }
}

TEST_CASE("the erm configuration degenerates to plain cross-entropy training") {
  engine::PreparedData data = tiny_track(3, 3, 12, 22);
  engine::Model model = engine::make_model(backbone::SplitDepth::Toy, 3, true, 4);
  engine::TrainConfig cfg = engine::erm_config({});
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.seed = 2;
  engine::TrainResult res = engine::train(model, data, cfg);
  for (const engine::LossRecord& r : res.history) {
    if (r.component == "disc") CHECK(r.value == 0.0);
    if (r.component == "sm") CHECK(r.value == 0.0);
    if (r.component == "ce") CHECK(r.value > 0.0);
  }
}

TEST_CASE("training is bit-reproducible under a fixed seed") {
  const std::string dir_a = (fs::temp_directory_path() / "odg_det_a").string();
  const std::string dir_b = (fs::temp_directory_path() / "odg_det_b").string();
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
  fs::create_directories(dir_a);
  fs::create_directories(dir_b);

  engine::PreparedData data = tiny_track(3, 4, 12, 33);
  engine::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 6;
  cfg.seed = 1234;

  for (const std::string& dir : {dir_a, dir_b}) {
    engine::Model model = engine::make_model(backbone::SplitDepth::Toy, 3, true, cfg.seed);
    engine::train(model, data, cfg, dir);
  }
  std::ifstream fa(dir_a + "/checkpoint.ckpt", std::ios::binary);
  std::ifstream fb(dir_b + "/checkpoint.ckpt", std::ios::binary);
  std::string a((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string b((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  CHECK(!a.empty());
  CHECK(a == b);
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST_CASE("checkpoint round trip restores the exact model") {
  engine::PreparedData data = tiny_track(3, 3, 12, 44);
  engine::Model model = engine::make_model(backbone::SplitDepth::Toy, 3, true, 7);
  engine::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.seed = 7;
  engine::train(model, data, cfg);

  const std::string path = (fs::temp_directory_path() / "odg_roundtrip.ckpt").string();
  engine::save_model(model, cfg, path);
  engine::Model loaded = engine::load_model(path);
  engine::EvalReport a = engine::evaluate(model, data);
  engine::EvalReport b = engine::evaluate(loaded, data);
  CHECK(a.acc_k == doctest::Approx(b.acc_k));
  CHECK(a.acc == doctest::Approx(b.acc));
  fs::remove(path);
}

TEST_CASE("evaluate is a pure function of checkpoint and dataset") {
  engine::PreparedData data = tiny_track(3, 3, 12, 55);
  engine::Model model = engine::make_model(backbone::SplitDepth::Toy, 3, true, 8);
  engine::EvalReport a = engine::evaluate(model, data);
  engine::EvalReport b = engine::evaluate(model, data);
  CHECK(a.acc_k == b.acc_k);
  CHECK(a.acc_u == b.acc_u);
  CHECK(a.acc == b.acc);
  CHECK(a.hs == b.hs);
}

TEST_CASE("train rejects labels outside the known range") {
  engine::PreparedData data = tiny_track(4, 2, 12, 66);  // labels 0..3
  engine::Model model = engine::make_model(backbone::SplitDepth::Toy, 3, true, 1);
  engine::TrainConfig cfg;
  CHECK_THROWS_AS(engine::train(model, data, cfg), std::invalid_argument);
}

TEST_CASE("closed-set mode trains a C-way head with no open predictions") {
  engine::PreparedData data = tiny_track(3, 4, 12, 77);
  engine::Model model = engine::make_model(backbone::SplitDepth::Toy, 3, false, 5);
  CHECK(model.head.num_outputs() == 3);
  engine::TrainConfig cfg;
  cfg.closed_set = true;
  cfg.use_open_branch = false;
  cfg.epochs = 1;
  cfg.batch_size = 6;
  cfg.seed = 5;
  engine::TrainResult res = engine::train(model, data, cfg);
  CHECK(res.steps > 0);
  engine::EvalReport rep = engine::evaluate(model, data);
  CHECK(rep.n_unknown == 0);
  CHECK(rep.acc_u == 0.0);
  CHECK(rep.hs == 0.0);
  for (const engine::LossRecord& r : res.history)
    if (r.component == "disc") CHECK(r.value == 0.0);
}

TEST_CASE("full-graph gradients match finite differences through one step") {
  // The probe drives train() with a learning rate too small to move any
  // parameter, so the returned history is the loss at the current point and
  // the post-step grads are the analytic gradient of the weighted total.
  engine::PreparedData data = tiny_track(3, 3, 12, 88);
  engine::TrainConfig cfg;
  cfg.learning_rate = 1e-300;
  cfg.epochs = 1;
  cfg.batch_size = 16;  // single step
  cfg.seed = 31;
  cfg.style_route_prob = 0.5;

  auto build = []() {
    return engine::make_model(backbone::SplitDepth::Toy, 3, true, 99);
  };
  auto total_loss = [&](engine::Model& m) {
    engine::TrainResult r = engine::train(m, data, cfg);
    double ce = 0, disc = 0, sm = 0;
    for (const engine::LossRecord& rec : r.history) {
      if (rec.component == "ce") ce = rec.value;
      if (rec.component == "disc") disc = rec.value;
      if (rec.component == "sm") sm = rec.value;
    }
    return cfg.weights.ce * ce + cfg.weights.disc * disc + cfg.weights.sm * sm;
  };

  engine::Model base = build();
  total_loss(base);
  nn::ParamRefs params = base.params();

  // representative coordinates from every parameter group
  struct Coord {
    std::size_t param;
    Eigen::Index j;
    double analytic;
  };
  std::vector<Coord> coords;
  Rng rng(123);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const Eigen::Index size = params[pi]->value.size();
    for (int k = 0; k < 2; ++k) {
      const Eigen::Index j = rng.uniform_int(0, static_cast<int>(size - 1));
      coords.push_back({pi, j, params[pi]->grad[j]});
    }
  }

  const double h = 1e-6;
  int checked = 0, skipped = 0;
  for (const Coord& c : coords) {
    auto eval_at = [&](double delta, double step) {
      engine::Model m = build();
      m.params()[c.param]->value[c.j] += delta * step;
      return total_loss(m);
    };
    const double fd = (eval_at(1, h) - eval_at(-1, h)) / (2.0 * h);
    const double fd_half = (eval_at(1, h / 2) - eval_at(-1, h / 2)) / (2.0 * (h / 2));
    // a kink between the probes shows up as inconsistent finite differences
    if (std::abs(fd - fd_half) > 1e-3 * std::max(1.0, std::abs(fd))) {
      ++skipped;
      continue;
    }
    const double denom = std::max({std::abs(fd), std::abs(c.analytic), 1e-6});
    CHECK(std::abs(fd - c.analytic) / denom < 2e-4);
    ++checked;
  }
  CHECK(checked >= 20);

  // gradient-flow invariant: every trainable group received signal
  double enc_grad = 0, head_grad = 0, ss_grad = 0, fa_grad = 0;
  for (nn::Param* p : base.encoder->params()) enc_grad += p->grad.cwiseAbs().sum();
  for (nn::Param* p : base.head.params()) head_grad += p->grad.cwiseAbs().sum();
  for (nn::Param* p : base.ssnet.params()) ss_grad += p->grad.cwiseAbs().sum();
  for (nn::Param* p : base.fanet.params()) fa_grad += p->grad.cwiseAbs().sum();
  CHECK(enc_grad > 0.0);
  CHECK(head_grad > 0.0);
  CHECK(ss_grad > 0.0);
  CHECK(fa_grad > 0.0);
}

TEST_CASE("gradient checker passes on every component group") {
  for (auto comp : {engine::GradComponent::Ssnet, engine::GradComponent::Fanet,
                    engine::GradComponent::Head, engine::GradComponent::Losses}) {
    engine::GradCheckReport rep = engine::grad_check(comp, 2024);
    for (const auto& g : rep.groups) {
      INFO(g.name << " max_rel_error " << g.max_rel_error);
      CHECK(g.pass);
      CHECK(g.checked >= 50);
    }
    CHECK(rep.pass);
  }
}

TEST_CASE("flat-band margin region has zero analytic and numeric gradients") {
  engine::GradCheckReport rep = engine::grad_check(engine::GradComponent::Ssnet, 7);
  bool found = false;
  for (const auto& g : rep.groups)
    if (g.name == "ssnet.inside_band") {
      found = true;
      CHECK(g.max_rel_error == doctest::Approx(0.0));
      CHECK(g.skipped_small == g.checked);  // everything is flat
    }
  CHECK(found);
}

TEST_CASE("diversity report flags degenerate synthesized styles") {
  engine::PreparedData data = tiny_track(3, 3, 12, 99);
  engine::Model model = engine::make_model(backbone::SplitDepth::Toy, 3, true, 12);
  model.ssnet.fc2.weight.value.setZero();
  model.ssnet.fc2.bias.value.setZero();
  engine::TrainConfig cfg;
  engine::DiversityReport rep = engine::style_diversity_report(model, data, 8, cfg);
  CHECK(rep.degenerate_styles);
  CHECK(rep.style_distance == 0.0);
}

TEST_CASE("echoed styles give zero diversity distance") {
  engine::PreparedData data = tiny_track(3, 3, 12, 111);
  engine::Model model = engine::make_model(backbone::SplitDepth::Toy, 3, true, 13);
  engine::TrainConfig cfg;
  engine::StyleOverride echo = [](const featstats::StyleStats& s1,
                                  const featstats::StyleStats&) { return s1; };
  engine::DiversityReport rep =
      engine::style_diversity_report(model, data, 8, cfg, echo);
  CHECK(!rep.degenerate_styles);
  CHECK(rep.style_distance == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(rep.embed_distance > 0.0);
}

TEST_CASE("mixstyle and ad-hoc open modes run end to end") {
  engine::PreparedData data = tiny_track(3, 3, 16, 121);
  for (auto mode : {engine::OpenMode::HalfCrop, engine::OpenMode::PixelMean}) {
    engine::Model model = engine::make_model(backbone::SplitDepth::Toy, 3, true, 3);
    engine::TrainConfig cfg;
    cfg.open_mode = mode;
    cfg.epochs = 1;
    cfg.batch_size = 12;
    CHECK_NOTHROW(engine::train(model, data, cfg));
  }
  {
    engine::Model model = engine::make_model(backbone::SplitDepth::Toy, 3, true, 3);
    engine::TrainConfig cfg;
    cfg.style_mode = engine::StyleMode::MixStyle;
    cfg.epochs = 1;
    cfg.batch_size = 12;
    engine::TrainResult res = engine::train(model, data, cfg);
    for (const engine::LossRecord& r : res.history)
      if (r.component == "sm") CHECK(r.value == 0.0);  // no synthesizer to bound
  }
}

}  // TEST_SUITE
