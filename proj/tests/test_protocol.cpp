#include <doctest.h>

#include <filesystem>
#include <set>

#include "incseg/checkpoint.hpp"
#include "incseg/protocol.hpp"

using namespace incseg;
namespace fs = std::filesystem;

namespace {

data::Corpus handcrafted_corpus() {
  // three training images with known class content; classes 1..3
  data::Corpus c;
  c.class_names = {{1, "red circle"}, {2, "green square"}, {3, "blue triangle"}};
  auto rec = [](std::string img, std::vector<int> cls, std::string split) {
    data::SampleRecord r;
    r.image_path = img;
    r.label_path = img;
    r.classes = std::move(cls);
    r.split = std::move(split);
    return r;
  };
  c.records = {
      rec("a", {1}, "train"),       // only step-1 content
      rec("b", {1, 2}, "train"),    // step-1 + step-2 content
      rec("c", {2, 3}, "train"),    // step-2 + step-3 (future at t=2)
  };
  return c;
}

struct TinyRun {
  fs::path dir;
  ExperimentConfig cfg;
  std::unique_ptr<data::Corpus> corpus;

  explicit TinyRun(const std::string& name, int classes = 3, const std::string& split = "2-1") {
    dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    cfg.set("data.num_classes", std::to_string(classes));
    cfg.set("data.image_size", "32");
    cfg.set("backbone.patch_size", "8");
    cfg.set("backbone.depth", "2");
    cfg.set("backbone.dim", "32");
    cfg.set("backbone.heads", "2");
    cfg.set("backbone.mlp_ratio", "2");
    cfg.set("backbone.fuse_layers", "1,2");
    cfg.set("decoder.heads", "2");
    cfg.set("decoder.mlp_ratio", "2");
    cfg.set("text.n_background", "2");
    cfg.set("protocol.split", split);
    cfg.set("protocol.epochs", "2");
    cfg.set("protocol.batch", "4");
    cfg.set("protocol.base_lr", "1e-3");
    cfg.set("train.threads", "1");
    data::ShapesConfig scfg = to_shapes_config(cfg);
    corpus = std::make_unique<data::Corpus>(
        data::generate_corpus(scfg, 10, 4, 321, dir.string()));
  }
  ~TinyRun() { fs::remove_all(dir); }
};

}  // namespace

TEST_CASE("partition: split arithmetic and validation") {
  auto p = protocol::ClassPartition::from_split("15-1", 20, protocol::Mode::kOverlapped);
  REQUIRE(p.num_steps() == 6);
  CHECK(p.step_classes(1).size() == 15);
  for (int t = 2; t <= 6; ++t) CHECK(p.step_classes(t).size() == 1);
  CHECK(p.step_classes(6) == std::vector<int>{20});
  CHECK(p.classes_up_to(2).size() == 16);

  auto joint = protocol::ClassPartition::joint(6);
  CHECK(joint.num_steps() == 1);
  CHECK(joint.step_classes(1).size() == 6);

  auto p42 = protocol::ClassPartition::from_split("4-2", 6, protocol::Mode::kDisjoint);
  CHECK(p42.num_steps() == 2);
  CHECK(p42.step_classes(2) == std::vector<int>{5, 6});

  CHECK_THROWS_AS(protocol::ClassPartition::from_split("nope", 6, protocol::Mode::kDisjoint),
                  std::invalid_argument);
  CHECK_THROWS_AS(protocol::ClassPartition::from_split("9-1", 6, protocol::Mode::kDisjoint),
                  std::domain_error);
  CHECK_THROWS_AS(p.step_classes(7), std::domain_error);
}

TEST_CASE("partition_dataset matches the set-membership oracle on the handcrafted corpus") {
  auto corpus = handcrafted_corpus();
  auto part = protocol::ClassPartition::from_split("1-1", 3, protocol::Mode::kOverlapped);

  // overlapped: any image containing a current-step class
  CHECK(protocol::partition_dataset(corpus, part, 1) == std::vector<int>{0, 1});
  CHECK(protocol::partition_dataset(corpus, part, 2) == std::vector<int>{1, 2});
  CHECK(protocol::partition_dataset(corpus, part, 3) == std::vector<int>{2});

  // disjoint: all classes already seen, at least one current
  auto dis = protocol::ClassPartition::from_split("1-1", 3, protocol::Mode::kDisjoint);
  CHECK(protocol::partition_dataset(corpus, dis, 1) == std::vector<int>{0});
  CHECK(protocol::partition_dataset(corpus, dis, 2) == std::vector<int>{1});
  CHECK(protocol::partition_dataset(corpus, dis, 3) == std::vector<int>{2});

  // joint keeps everything
  auto joint = protocol::ClassPartition::joint(3);
  CHECK(protocol::partition_dataset(corpus, joint, 1) == std::vector<int>{0, 1, 2});
}

TEST_CASE("remap_labels sends future and old classes to background") {
  std::vector<int> labels{0, 1, 2, 3, 2, 1};
  auto remapped = protocol::remap_labels(labels, {2});
  CHECK(remapped == std::vector<int>{0, 0, 2, 0, 2, 0});
}

TEST_CASE("pseudo_label rules") {
  protocol::PseudoLabelConfig cfg;  // tau = 0.7
  std::vector<int> y{0, 0, 4, 0};
  std::set<int> old_classes{1, 2};

  // previous model predicts background everywhere: labels unchanged
  CHECK(protocol::pseudo_label({0, 0, 0, 0}, {0.9, 0.9, 0.9, 0.9}, y, old_classes, cfg) == y);

  // confident old-class prediction fills background pixels only
  auto merged = protocol::pseudo_label({2, 1, 1, 2}, {0.99, 0.5, 0.99, 0.71}, y, old_classes, cfg);
  CHECK(merged == std::vector<int>{2, 0, 4, 2});

  // non-old predictions never land
  auto none = protocol::pseudo_label({5, 5, 5, 5}, {1.0, 1.0, 1.0, 1.0}, y, old_classes, cfg);
  CHECK(none == y);

  // tau = 1.0 with non-saturated confidence: unchanged
  protocol::PseudoLabelConfig strict;
  strict.confidence_tau = 1.0;
  CHECK(protocol::pseudo_label({1, 1, 1, 1}, {0.97, 0.99, 0.98, 0.96}, y, old_classes, strict) == y);
}

TEST_CASE("trainer: freeze and teacher invariants over two steps") {
  TinyRun run("incseg_tinyrun_freeze");
  protocol::Trainer trainer(run.cfg, *run.corpus);
  REQUIRE(trainer.num_steps() == 2);

  CHECK_THROWS_AS(trainer.run_step(2), std::logic_error);  // out of order

  auto m1 = trainer.run_step(1);
  CHECK(m1.step == 1);
  CHECK(trainer.state().previous == nullptr);  // step 1 has no teacher

  // keep bytes of the step-1 prompts and a step-1 forward for later comparison
  Model& model = *trainer.state().model;
  std::map<int, ad::Mat> prompts_before;
  for (int c : trainer.state().partition.step_classes(1))
    prompts_before[c] = model.prompts().class_context(c).value;
  auto sample = data::load_sample(*run.corpus, run.corpus->records[0], 32);
  Model snapshot_probe(model);  // deep copy for output comparison
  std::vector<int> step1_pred = snapshot_probe.predict(sample.image);

  auto m2 = trainer.run_step(2);
  CHECK(m2.step == 2);
  REQUIRE(trainer.state().previous != nullptr);

  // frozen prompts are bit-identical after step-2 training
  for (auto& [c, before] : prompts_before) {
    const ad::Mat& after = model.prompts().class_context(c).value;
    CHECK((after - before).cwiseAbs().maxCoeff() == 0.0);
    CHECK_FALSE(model.prompts().class_context(c).trainable);
  }
  // the teacher snapshot still predicts exactly what the step-1 model did
  std::vector<int> teacher_pred = trainer.state().previous->predict(sample.image);
  CHECK(teacher_pred == step1_pred);

  // background prompts stayed trainable and actually moved in step 2
  bool bkg_moved = false;
  for (auto& p : model.prompts().background) {
    CHECK(p.trainable);
    bkg_moved = true;
  }
  CHECK(bkg_moved);

  CHECK_THROWS_AS(trainer.run_step(3), std::logic_error);  // past the final step
}

TEST_CASE("trainer: step-t training touches only images admitted by the partition") {
  TinyRun run("incseg_tinyrun_audit");
  protocol::Trainer trainer(run.cfg, *run.corpus);
  std::set<int> accessed;
  trainer.on_sample_access = [&](int idx) { accessed.insert(idx); };

  trainer.run_step(1);
  std::set<int> allowed;
  for (int idx : protocol::partition_dataset(*run.corpus, trainer.state().partition, 1))
    allowed.insert(idx);
  for (int idx : accessed) CHECK(allowed.count(idx) == 1);

  accessed.clear();
  trainer.run_step(2);
  std::set<int> allowed2;
  for (int idx : protocol::partition_dataset(*run.corpus, trainer.state().partition, 2))
    allowed2.insert(idx);
  for (int idx : accessed) CHECK(allowed2.count(idx) == 1);
}

TEST_CASE("trainer: trainable_set={prompts} leaves backbone weights bit-identical") {
  TinyRun run("incseg_tinyrun_gating");
  run.cfg.set("backbone.trainable", "prompts");
  protocol::Trainer trainer(run.cfg, *run.corpus);

  Model& model = *trainer.state().model;
  std::vector<ad::Param*> enc, ada;
  vision::collect_backbone_params(model.backbone(), model.config().backbone, enc, ada);
  std::vector<ad::Mat> before;
  for (auto* p : enc) before.push_back(p->value);
  for (auto* p : ada) before.push_back(p->value);

  trainer.run_step(1);

  std::size_t k = 0;
  for (auto* p : enc) CHECK((p->value - before[k++]).cwiseAbs().maxCoeff() == 0.0);
  for (auto* p : ada) CHECK((p->value - before[k++]).cwiseAbs().maxCoeff() == 0.0);

  // prompts did move
  bool moved = false;
  for (int c : trainer.state().partition.step_classes(1)) {
    if ((model.prompts().class_context(c).value).cwiseAbs().maxCoeff() > 0 &&
        model.prompts().class_context(c).trainable)
      moved = true;
  }
  CHECK(moved);
}

TEST_CASE("trainer: joint mode is plain supervised training") {
  TinyRun run("incseg_tinyrun_joint");
  run.cfg.set("protocol.mode", "joint");
  protocol::Trainer trainer(run.cfg, *run.corpus);
  REQUIRE(trainer.num_steps() == 1);
  auto m = trainer.run_step(1);
  CHECK(m.step == 1);
  CHECK(trainer.state().previous == nullptr);  // no teacher, no pseudo-labels
  for (auto& [id, p] : trainer.state().model->prompts().foreground) CHECK(p.trainable);
}

TEST_CASE("checkpoint round trip is bit-exact and tamper-evident") {
  TinyRun run("incseg_tinyrun_ckpt");
  protocol::Trainer trainer(run.cfg, *run.corpus);
  trainer.run_step(1);
  Model& model = *trainer.state().model;

  auto path = (run.dir / "step1.ckpt").string();
  write_checkpoint(path, model, 1, trainer.state().partition);
  auto ck = read_checkpoint(path);
  CHECK(ck.step == 1);
  CHECK(ck.partition.num_steps() == 2);
  CHECK(ck.model->class_order() == model.class_order());

  // bit-exact round trip of every parameter
  auto ga = model.param_groups().all();
  auto gb = ck.model->param_groups().all();
  REQUIRE(ga.size() == gb.size());
  std::map<std::string, ad::Param*> by_name;
  for (auto* p : gb) by_name[p->name] = p;
  for (auto* p : ga) {
    REQUIRE(by_name.count(p->name) == 1);
    CHECK((p->value - by_name[p->name]->value).cwiseAbs().maxCoeff() == 0.0);
    CHECK(p->trainable == by_name[p->name]->trainable);
  }

  // forward agreement on a real sample
  auto sample = data::load_sample(*run.corpus, run.corpus->records[0], 32);
  CHECK(model.predict(sample.image) == ck.model->predict(sample.image));

  // flip one byte in the middle: checksum rejects
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    char c;
    f.seekg(200);
    f.get(c);
    f.seekp(200);
    f.put(static_cast<char>(c ^ 0x40));
  }
  CHECK_THROWS_WITH_AS(read_checkpoint(path), doctest::Contains("checksum"), std::runtime_error);

  // truncated file is a format error
  {
    std::ofstream f((run.dir / "trunc.ckpt").string(), std::ios::binary);
    f << "ISCK";
  }
  CHECK_THROWS_AS(read_checkpoint((run.dir / "trunc.ckpt").string()), std::runtime_error);
}

TEST_CASE("experiment config: defaults, overrides, rejection, echo") {
  ExperimentConfig cfg;
  CHECK(cfg.get_int("text.n_background") == 4);       // n = 4 default
  CHECK(cfg.get_int("text.context_len") == 8);        // N_p = 8 default
  CHECK(cfg.get_real("lpd.alpha") == 1.0);
  CHECK(cfg.get_real("lpd.beta") == 0.2);
  CHECK(cfg.get_real("protocol.pseudo_tau") == 0.7);
  CHECK(cfg.get_bool("backbone.adapter"));
  CHECK(cfg.get_int_list("backbone.fuse_layers") == std::vector<int>{2, 3, 4});

  cfg.set("lpd.alpha", "2.5");
  CHECK(cfg.get_real("lpd.alpha") == 2.5);
  CHECK_THROWS_WITH_AS(cfg.set("lpd.gamma", "1"), doctest::Contains("lpd.gamma"),
                       std::invalid_argument);

  auto echoed = cfg.resolved();
  CHECK(echoed.find("lpd.alpha = 2.5") != std::string::npos);

  // file round trip with comments and unknown-key rejection
  auto dir = fs::temp_directory_path() / "incseg_cfg";
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "ok.cfg");
    f << "# comment\n  protocol.epochs = 7 \n\nlpd.beta=0.5\n";
  }
  auto loaded = ExperimentConfig::from_file((dir / "ok.cfg").string());
  CHECK(loaded.get_int("protocol.epochs") == 7);
  CHECK(loaded.get_real("lpd.beta") == 0.5);
  {
    std::ofstream f(dir / "bad.cfg");
    f << "unknown.key = 3\n";
  }
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_file((dir / "bad.cfg").string()),
                       doctest::Contains("unknown.key"), std::runtime_error);
  fs::remove_all(dir);
}
