#include "incseg/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <thread>

#include "incseg/optimizer.hpp"
#include "incseg/rng.hpp"

namespace incseg::protocol {

Mode mode_from_string(const std::string& s) {
  if (s == "disjoint") return Mode::kDisjoint;
  if (s == "overlapped") return Mode::kOverlapped;
  if (s == "joint") return Mode::kJoint;
  throw std::invalid_argument("protocol.mode: unknown mode " + s);
}

std::string to_string(Mode m) {
  switch (m) {
    case Mode::kDisjoint: return "disjoint";
    case Mode::kOverlapped: return "overlapped";
    case Mode::kJoint: return "joint";
  }
  return "?";
}

ClassPartition ClassPartition::from_split(const std::string& split, int num_classes, Mode mode) {
  if (mode == Mode::kJoint) return joint(num_classes);
  auto dash = split.find('-');
  if (dash == std::string::npos)
    throw std::invalid_argument("partition: split must look like 15-1, got " + split);
  int first = std::stoi(split.substr(0, dash));
  int inc = std::stoi(split.substr(dash + 1));
  if (first < 1 || inc < 1 || first > num_classes)
    throw std::domain_error("partition: invalid split " + split);
  ClassPartition p;
  p.mode = mode;
  int next = 1;
  std::vector<int> base;
  for (int i = 0; i < first; ++i) base.push_back(next++);
  p.steps.push_back(base);
  while (next <= num_classes) {
    std::vector<int> step;
    for (int i = 0; i < inc && next <= num_classes; ++i) step.push_back(next++);
    p.steps.push_back(step);
  }
  p.validate(num_classes);
  return p;
}

ClassPartition ClassPartition::joint(int num_classes) {
  ClassPartition p;
  p.mode = Mode::kJoint;
  std::vector<int> all;
  for (int i = 1; i <= num_classes; ++i) all.push_back(i);
  p.steps.push_back(all);
  return p;
}

const std::vector<int>& ClassPartition::step_classes(int t) const {
  if (t < 1 || t > num_steps()) throw std::domain_error("partition: step out of range");
  return steps[static_cast<std::size_t>(t - 1)];
}

std::vector<int> ClassPartition::classes_up_to(int t) const {
  std::vector<int> out;
  for (int s = 1; s <= t; ++s) {
    const auto& cs = step_classes(s);
    out.insert(out.end(), cs.begin(), cs.end());
  }
  return out;
}

std::vector<int> ClassPartition::old_classes(int t) const { return classes_up_to(t - 1); }

void ClassPartition::validate(int num_classes) const {
  std::set<int> seen;
  for (const auto& step : steps)
    for (int c : step) {
      if (c == 0) throw std::domain_error("partition: background id 0 belongs to no step");
      if (!seen.insert(c).second) throw std::domain_error("partition: class appears in two steps");
    }
  if (static_cast<int>(seen.size()) != num_classes)
    throw std::domain_error("partition: steps do not cover every foreground class");
}

std::vector<int> partition_dataset(const data::Corpus& corpus, const ClassPartition& partition,
                                   int t) {
  const auto& current = partition.step_classes(t);
  std::set<int> cur(current.begin(), current.end());
  std::set<int> upto;
  for (int c : partition.classes_up_to(t)) upto.insert(c);

  std::vector<int> out;
  for (int idx : corpus.indices("train")) {
    const auto& rec = corpus.records[static_cast<std::size_t>(idx)];
    bool any_current = false, all_seen = true;
    for (int c : rec.classes) {
      if (cur.count(c)) any_current = true;
      if (!upto.count(c)) all_seen = false;
    }
    switch (partition.mode) {
      case Mode::kJoint:
        out.push_back(idx);
        break;
      case Mode::kOverlapped:
        if (any_current) out.push_back(idx);
        break;
      case Mode::kDisjoint:
        // images made of seen classes only, at least one from the current step
        if (any_current && all_seen) out.push_back(idx);
        break;
    }
  }
  return out;
}

std::vector<int> remap_labels(const std::vector<int>& labels, const std::set<int>& current) {
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    out[i] = current.count(labels[i]) ? labels[i] : 0;
  return out;
}

std::vector<int> pseudo_label(const std::vector<int>& prev_pred, const std::vector<double>& prev_conf,
                              const std::vector<int>& remapped, const std::set<int>& old_classes,
                              const PseudoLabelConfig& cfg) {
  if (prev_pred.size() != remapped.size() || prev_conf.size() != remapped.size())
    throw std::invalid_argument("pseudo_label: size mismatch");
  std::vector<int> out = remapped;
  for (std::size_t i = 0; i < remapped.size(); ++i) {
    if (remapped[i] != 0) continue;  // ground-truth current-class pixels stay
    int p = prev_pred[i];
    if (p != 0 && old_classes.count(p) && prev_conf[i] >= cfg.confidence_tau) out[i] = p;
  }
  return out;
}

Trainer::Trainer(const ExperimentConfig& cfg, const data::Corpus& corpus)
    : cfg_(cfg), corpus_(corpus) {
  lpd_ = to_lpd_config(cfg);
  pseudo_.confidence_tau = cfg.get_real("protocol.pseudo_tau");
  lpd_enabled_ = cfg.get_bool("lpd.enabled");
  mbd_enabled_ = cfg.get_bool("mbd.enabled");
  epochs_ = static_cast<int>(cfg.get_int("protocol.epochs"));
  batch_ = static_cast<int>(cfg.get_int("protocol.batch"));
  threads_ = std::max(1, static_cast<int>(cfg.get_int("train.threads")));
  lambda_lpd_ = cfg.get_real("protocol.lambda_lpd");
  lambda_bkg_ = cfg.get_real("protocol.lambda_bkg");
  incremental_lr_scale_ = cfg.get_real("protocol.incremental_lr_scale");
  encoder_lr_scale_ = cfg.get_real("protocol.encoder_lr_scale");
  seed_ = static_cast<std::uint64_t>(cfg.get_int("seed"));

  const Mode mode = mode_from_string(cfg.get_string("protocol.mode"));
  const int num_classes = static_cast<int>(cfg.get_int("data.num_classes"));
  state_.partition = mode == Mode::kJoint
                         ? ClassPartition::joint(num_classes)
                         : ClassPartition::from_split(cfg.get_string("protocol.split"),
                                                      num_classes, mode);
  state_.model = std::make_unique<Model>(to_model_config(cfg));
  const std::string tfile = cfg.get_string("text.templates_file");
  if (!tfile.empty()) state_.model->set_descriptions(text::load_descriptions(tfile));
}

std::vector<Trainer::PreparedSample> Trainer::prepare_step_samples(int t) {
  const int resolution = state_.model->config().backbone.image_size;
  const int grid = state_.model->config().backbone.grid();
  const auto& current = state_.partition.step_classes(t);
  std::set<int> cur(current.begin(), current.end());
  std::set<int> old_set;
  for (int c : state_.partition.old_classes(t)) old_set.insert(c);

  std::vector<PreparedSample> out;
  for (int idx : partition_dataset(corpus_, state_.partition, t)) {
    if (on_sample_access) on_sample_access(idx);
    auto loaded = data::load_sample(corpus_, corpus_.records[static_cast<std::size_t>(idx)],
                                    resolution);
    PreparedSample ps;
    ps.corpus_index = idx;
    ps.image = std::move(loaded.image);
    std::vector<int> remapped = remap_labels(loaded.labels, cur);
    std::vector<int> merged = remapped;
    if (t >= 2 && state_.previous) {
      std::vector<int> pred;
      std::vector<double> conf;
      state_.previous->predict_with_confidence(ps.image, pred, conf);
      merged = pseudo_label(pred, conf, remapped, old_set, pseudo_);
    }
    // channel-space labels for the cross entropy
    ps.merged_channel_labels.resize(merged.size());
    for (std::size_t i = 0; i < merged.size(); ++i)
      ps.merged_channel_labels[i] =
          merged[i] == 0 ? 0 : state_.model->channel_of(merged[i]);
    ps.gt_patch_ids = data::downsample_labels_nearest(remapped, resolution, resolution, grid, grid);
    out.push_back(std::move(ps));
  }
  return out;
}

double Trainer::train_epochs(int t, std::vector<PreparedSample>& samples) {
  Model& model = *state_.model;
  const auto& bb = model.config().backbone;
  const int n_bkg = model.config().prompt_tuning ? model.config().n_background : 1;
  const int grid = bb.grid();

  auto groups = model.param_groups();
  AdamW opt(to_optim_config(cfg_));
  const double step_scale = t >= 2 ? incremental_lr_scale_ : 1.0;
  const auto& trainable = bb.trainable;
  opt.add_group(groups.prompts, step_scale,
                trainable.count(vision::Component::kPrompts) && model.config().prompt_tuning);
  opt.add_group(groups.encoder, step_scale * encoder_lr_scale_,
                trainable.count(vision::Component::kEncoder) > 0);
  opt.add_group(groups.adapter, step_scale,
                trainable.count(vision::Component::kAdapter) && bb.adapter_enabled);
  opt.add_group(groups.decoder, step_scale, true);

  const auto& old_ids = state_.partition.old_classes(t);
  const auto& new_ids = state_.partition.step_classes(t);
  const bool use_lpd = lpd_enabled_ && t >= 2 && model.config().prompt_tuning;
  const bool use_mbd = mbd_enabled_ && t >= 2;
  const int n_fg = model.n_foreground();

  // template matrix in class order, for the LPD losses
  ad::Mat templ(n_fg, bb.dim);
  for (int i = 0; i < n_fg; ++i)
    templ.row(i) = model.templates().at(model.class_order()[static_cast<std::size_t>(i)]).transpose();
  std::vector<bool> is_current(static_cast<std::size_t>(n_fg), false);
  for (int c : new_ids)
    is_current[static_cast<std::size_t>(model.channel_of(c) - 1)] = true;

  losses::LpdConfig lpd = lpd_;

  double last_epoch_loss = 0.0;
  for (int epoch = 0; epoch < epochs_; ++epoch) {
    std::vector<int> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng shuffle(derive_seed(seed_, "shuffle." + std::to_string(t) + "." + std::to_string(epoch)));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle.below(i)]);

    double epoch_loss = 0.0;
    long counted = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(batch_)) {
      const std::size_t bend = std::min(order.size(), b0 + static_cast<std::size_t>(batch_));
      const int bsize = static_cast<int>(bend - b0);
      opt.zero_grad();

      // per-image forwards; Param::grad accumulation stays in index order so
      // the reduction is deterministic for any thread count
      std::vector<double> image_losses(static_cast<std::size_t>(bsize), 0.0);
      auto run_image = [&](int bi) -> ad::Tape {
        const PreparedSample& ps = samples[static_cast<std::size_t>(order[b0 + bi])];
        ad::Tape tape;
        ForwardResult fr = model.forward(tape, ps.image);
        ad::Value loss = losses::ce_loss(tape, fr.full, ps.merged_channel_labels);
        if (use_lpd) {
          ad::Value fg = tape.slice_rows(fr.text_raw, n_bkg, n_fg);
          ad::Value dense = losses::dense_loss(tape, fg, templ, fr.patches_raw, lpd);
          loss = tape.add(loss, tape.scale(dense, lambda_lpd_ * lpd.beta));
        }
        if (use_mbd && !old_ids.empty()) {
          const ad::Mat& sc = tape.val(fr.scores);
          losses::MaskSets ms = losses::build_mask_sets(
              sc.topRows(n_bkg + static_cast<Eigen::Index>(old_ids.size())), n_bkg,
              ps.gt_patch_ids, old_ids, new_ids, grid, grid);
          auto bkg = losses::bkg_contrastive_loss(tape, ms, fr.patches_raw);
          if (!bkg.all_skipped) loss = tape.add(loss, tape.scale(bkg.loss, lambda_bkg_));
        }
        image_losses[static_cast<std::size_t>(bi)] = tape.val(loss)(0, 0);
        tape.backward(loss, 1.0 / bsize);
        return tape;
      };
      for (int wave = 0; wave < bsize; wave += threads_) {
        const int wsize = std::min(threads_, bsize - wave);
        std::vector<ad::Tape> tapes;
        tapes.reserve(static_cast<std::size_t>(wsize));
        if (wsize == 1) {
          tapes.push_back(run_image(wave));
        } else {
          std::vector<std::optional<ad::Tape>> slots(static_cast<std::size_t>(wsize));
          std::vector<std::thread> workers;
          for (int wi = 0; wi < wsize; ++wi)
            workers.emplace_back([&, wi] { slots[static_cast<std::size_t>(wi)] = run_image(wave + wi); });
          for (auto& th : workers) th.join();
          for (auto& s : slots) tapes.push_back(std::move(*s));
        }
        for (auto& tape : tapes) tape.accumulate_param_grads();
      }
      for (double l : image_losses) epoch_loss += l;
      counted += bsize;

      // text-side relational losses, once per optimizer step
      if (use_lpd && n_fg >= 2) {
        ad::Tape tape;
        ad::Value text = model.text_embeddings(tape);
        ad::Value fg = tape.slice_rows(text, n_bkg, n_fg);
        ad::Value plast = losses::plasticity_loss(tape, fg, is_current, lpd);
        ad::Value total = tape.scale(plast, lpd.alpha);
        if (n_fg >= 3) {
          ad::Value stab = losses::stability_loss(tape, fg, templ, lpd.huber,
                                                  lpd.normalize_distances);
          total = tape.add(stab, total);
        }
        epoch_loss += tape.val(total)(0, 0) * lambda_lpd_ * bsize;
        tape.backward(total, lambda_lpd_);
        tape.accumulate_param_grads();
      }
      opt.step();
    }
    last_epoch_loss = counted > 0 ? epoch_loss / static_cast<double>(counted) : 0.0;
  }
  return last_epoch_loss;
}

StepMetrics Trainer::run_step(int t) {
  if (t != state_.completed_steps + 1)
    throw std::logic_error("run_step: steps must run in order; expected step " +
                           std::to_string(state_.completed_steps + 1));
  if (t > num_steps()) throw std::logic_error("run_step: past the final step");
  Model& model = *state_.model;

  if (t >= 2) {
    state_.previous = std::make_unique<Model>(model);  // frozen teacher snapshot
    text::freeze_prompts(model.prompts(), state_.partition.old_classes(t));
  }

  // register this step's classes
  std::vector<std::pair<int, std::string>> newcomers;
  for (int c : state_.partition.step_classes(t)) {
    auto it = corpus_.class_names.find(c);
    newcomers.emplace_back(c, it != corpus_.class_names.end()
                                  ? it->second
                                  : "class " + std::to_string(c));
  }
  model.register_classes(newcomers);

  // background weight transfer for incremental steps
  if (t >= 2 && model.config().prompt_tuning) {
    auto bkg = model.background_embeddings_plain();
    for (int c : state_.partition.step_classes(t))
      text::transfer_weights(c, model.templates(), bkg, model.prompts());
  }

  auto samples = prepare_step_samples(t);
  const double train_loss = train_epochs(t, samples);
  StepMetrics sm = evaluate(model, t);
  sm.train_loss = train_loss;
  state_.completed_steps = t;
  return sm;
}

StepMetrics Trainer::evaluate(Model& model, int t) {
  const int resolution = model.config().backbone.image_size;
  std::set<int> seen;
  for (int c : state_.partition.classes_up_to(t)) seen.insert(c);

  metrics::ConfusionMatrix cm(static_cast<int>(corpus_.class_names.size()) + 1);
  for (int idx : corpus_.indices("test")) {
    auto loaded = data::load_sample(corpus_, corpus_.records[static_cast<std::size_t>(idx)],
                                    resolution);
    std::vector<int> gt = remap_labels(loaded.labels, seen);
    std::vector<int> pred = model.predict(loaded.image);
    metrics::accumulate(cm, pred, gt);
  }
  StepMetrics sm;
  sm.step = t;
  sm.confusion = cm;
  std::vector<int> base = state_.partition.step_classes(1);
  std::vector<int> incr;
  for (int s = 2; s <= t; ++s)
    for (int c : state_.partition.step_classes(s)) incr.push_back(c);
  sm.report = metrics::miou(cm, base, incr);
  return sm;
}

}  // namespace incseg::protocol
