// mtat: command-line front end for data generation, meta-training, few-shot
// fine-tuning, evaluation and the ablation grid.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "mtat/artifacts.hpp"
#include "mtat/checkpoint.hpp"
#include "mtat/config.hpp"
#include "mtat/gradcheck.hpp"
#include "mtat/meta.hpp"
#include "mtat/ops.hpp"
#include "mtat/pipeline.hpp"
#include "mtat/png_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mtat;

namespace {

// Exit codes.
constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kFault = 2;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  std::vector<std::pair<std::string, std::string>> overrides;  // dotted path, text
};

std::string flag_name(std::string s) {
  for (auto& c : s) {
    if (c == '_' || c == '.') c = '-';
  }
  return s;
}

// --section-leaf for every config leaf, plus --leaf where the leaf name is
// unambiguous.
void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON config file; flags override it")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "run seed");
  app->add_option("--out-dir", c.out_dir, "output directory")->capture_default_str();
  const auto paths = config_leaf_paths();
  std::map<std::string, int> leaf_count;
  for (const auto& p : paths) ++leaf_count[p.substr(p.rfind('.') + 1)];
  c.overrides.reserve(paths.size());
  for (const auto& p : paths) {
    if (p == "seed") continue;
    const std::string leaf = p.substr(p.rfind('.') + 1);
    std::string names = "--" + flag_name(p);
    if (leaf_count[leaf] == 1 && leaf != "threads") names += ",--" + flag_name(leaf);
    if (p == "fewshot.held_out") names += ",--holdout";
    c.overrides.emplace_back(p, "");
    app->add_option(names, c.overrides.back().second, "config " + p)->group("Config overrides");
  }
}

// Effective config: defaults, then `base` (a checkpoint's config), then the
// --config file, then flags.
RunConfig effective_config(CLI::App* app, const Common& c, const std::optional<json>& base = std::nullopt) {
  json j = base ? *base : to_json(RunConfig{});
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    json file;
    try {
      file = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError(c.config_path + ": " + e.what());
    }
    j = to_json(config_from_json(j));
    j.merge_patch(file);
  }
  for (const auto& [path, text] : c.overrides) {
    if (app->count("--" + flag_name(path)) > 0) set_config_value(j, path, text);
  }
  if (c.seed) j["seed"] = *c.seed;
  RunConfig cfg = config_from_json(j);
  cfg.finalize();
  return cfg;
}

void echo_config(const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream(fs::path(out_dir) / "config.json") << canonical_text(cfg);
}

json checkpoint_config(const Checkpoint& ckpt) {
  const auto it = ckpt.texts.find("config");
  if (it == ckpt.texts.end()) throw CheckpointError("checkpoint carries no config");
  return json::parse(it->second);
}

Checkpoint networks_checkpoint(const RunConfig& cfg, const Networks& net, std::uint64_t iteration) {
  Checkpoint c;
  c.config_digest = config_digest(cfg);
  c.iteration = iteration;
  c.texts["config"] = canonical_text(cfg);
  c.put_params("G", net.g);
  c.put_params("D", net.d);
  return c;
}

Probe obtain_probe(const RunConfig& cfg, const Splits& data, const std::string& probe_path) {
  if (!probe_path.empty()) return probe_from_checkpoint(load_checkpoint(probe_path));
  std::cerr << "training probe classifier\n";
  Probe p = fit_probe(cfg, data);
  std::cerr << "probe validation accuracy " << p.val_accuracy << " after " << p.steps << " steps\n";
  return p;
}

std::vector<std::string> eval_header(const RunConfig& cfg) {
  std::vector<std::string> h{"phase", "target", "target_accuracy"};
  for (const auto& a : cfg.data.attributes) h.push_back("acc_" + a);
  h.push_back("cycle_l1");
  return h;
}

std::vector<std::string> eval_row(const RunConfig& cfg, const std::string& phase, const EvalMetrics& m) {
  std::vector<std::string> r{phase, cfg.data.attributes[static_cast<std::size_t>(m.target)],
                             format_double(m.target_accuracy)};
  for (const double a : m.domain_accuracy) r.push_back(format_double(a));
  r.push_back(format_double(m.cycle_l1));
  return r;
}

void print_metrics(const RunConfig& cfg, const std::string& phase, const EvalMetrics& m) {
  std::printf("%-8s target %-6s accuracy %.3f  cycle_l1 %.4f  per-domain", phase.c_str(),
              cfg.data.attributes[static_cast<std::size_t>(m.target)].c_str(), m.target_accuracy, m.cycle_l1);
  for (std::size_t d = 0; d < m.domain_accuracy.size(); ++d) {
    std::printf(" %s=%.3f", cfg.data.attributes[d].c_str(), m.domain_accuracy[d]);
  }
  std::printf("\n");
}

int cmd_gen_data(CLI::App* app, const Common& c) {
  RunConfig cfg = effective_config(app, c);
  echo_config(cfg, c.out_dir);
  const Dataset data = gen_synthetic(cfg.data.seed, cfg.data.n_per_domain, cfg.data.image_size, cfg.attribute_set());
  const fs::path dir = fs::path(c.out_dir) / "images";
  fs::create_directories(dir);
  // CelebA-style attribute list so the folder ingestion path can read it back.
  std::ofstream attr(fs::path(c.out_dir) / "list_attr.txt");
  attr << data.size() << "\n";
  for (std::size_t a = 0; a < cfg.data.attributes.size(); ++a) attr << (a ? " " : "") << cfg.data.attributes[a];
  attr << "\n";
  std::vector<Tensor<float>> preview;
  for (std::int64_t i = 0; i < data.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%06lld.png", static_cast<long long>(i));
    write_png((dir / name).string(), to_rgb_image(image_at(data.images, i)));
    attr << name;
    for (std::int64_t d = 0; d < data.n_domains; ++d) attr << (d == data.labels[i] ? "  1" : " -1");
    attr << "\n";
  }
  const std::int64_t per_row = 8;
  for (std::int64_t d = 0; d < data.n_domains; ++d) {
    const auto idx = data.indices_of(d);
    for (std::int64_t k = 0; k < per_row; ++k) preview.push_back(image_at(data.images, idx[k % idx.size()]));
  }
  write_image_grid(preview, data.n_domains, per_row, (fs::path(c.out_dir) / "preview.png").string(), {});
  std::printf("wrote %lld images to %s\n", static_cast<long long>(data.size()), dir.string().c_str());
  return kOk;
}

int cmd_probe_train(CLI::App* app, const Common& c) {
  RunConfig cfg = effective_config(app, c);
  echo_config(cfg, c.out_dir);
  const Splits data = prepare_data(cfg);
  for (const auto& m : data.messages) std::cerr << m << "\n";
  Probe p = fit_probe(cfg, data);
  const double test_acc = probe_accuracy(p, data.test.images, data.test.labels);
  save_checkpoint((fs::path(c.out_dir) / "probe.ckpt").string(), probe_checkpoint(p));
  std::printf("probe: %lld steps, validation accuracy %.4f, test accuracy %.4f\n", static_cast<long long>(p.steps),
              p.val_accuracy, test_acc);
  if (test_acc < cfg.probe.min_accuracy) {
    std::fprintf(stderr, "error: probe test accuracy %.4f is below probe.min_accuracy %.4f\n", test_acc,
                 cfg.probe.min_accuracy);
    return kFault;
  }
  return kOk;
}

int cmd_train_meta(CLI::App* app, const Common& c, const std::string& resume_path, bool allow_change) {
  std::optional<Checkpoint> resume;
  std::optional<json> base;
  if (!resume_path.empty()) {
    resume = load_checkpoint(resume_path);
    base = checkpoint_config(*resume);
  }
  RunConfig cfg = effective_config(app, c, base);
  if (resume && resume->config_digest != config_digest(cfg)) {
    std::cerr << "warning: resume checkpoint was written with a different config (digest "
              << hex(resume->config_digest).substr(0, 12) << " vs " << hex(config_digest(cfg)).substr(0, 12) << ")\n";
    if (!allow_change) throw ConfigError("config changed since the checkpoint; pass --allow-config-change to continue");
  }
  echo_config(cfg, c.out_dir);
  const Splits data = prepare_data(cfg);
  for (const auto& m : data.messages) std::cerr << m << "\n";
  const fs::path out(c.out_dir);
  CsvWriter csv((out / "metrics.csv").string(), {"iteration", "target", "d_adv", "d_class", "d_gp", "d_total", "g_adv",
                                                 "g_class", "g_cycle", "g_total"});
  MetaHooks hooks;
  const std::int64_t log_every = std::max<std::int64_t>(1, cfg.meta.n_iter / 20);
  hooks.on_iteration = [&](std::int64_t it, const LossReport& r, std::int64_t target) {
    csv.append(std::vector<double>{static_cast<double>(it), static_cast<double>(target), r.d_adv, r.d_class, r.d_gp,
                                   r.d_total, r.g_adv, r.g_class, r.g_cycle, r.g_total});
    if ((it + 1) % log_every == 0 || it + 1 == cfg.meta.n_iter) {
      std::fprintf(stderr, "iter %6lld  d_total %8.4f  g_total %8.4f  gp %.4f\n", static_cast<long long>(it + 1),
                   r.d_total, r.g_total, r.d_gp);
    }
  };
  hooks.on_checkpoint = [&](const Checkpoint& ck) { save_checkpoint((out / "meta.ckpt").string(), ck); };
  MetaResult res = meta_train(cfg, data.train, hooks, resume ? &*resume : nullptr);
  save_checkpoint((out / "meta.ckpt").string(), res.checkpoint);
  std::printf("meta-training finished at iteration %llu; checkpoint %s\n",
              static_cast<unsigned long long>(res.checkpoint.iteration), (out / "meta.ckpt").string().c_str());
  return kOk;
}

struct LoadedRun {
  RunConfig cfg;
  Checkpoint ckpt;
  Networks net;
};

LoadedRun load_run(CLI::App* app, const Common& c, const std::string& ckpt_path) {
  LoadedRun r;
  r.ckpt = load_checkpoint(ckpt_path);
  r.cfg = effective_config(app, c, checkpoint_config(r.ckpt));
  r.net = networks_from_checkpoint(r.cfg, r.ckpt);
  return r;
}

int cmd_finetune(CLI::App* app, const Common& c, const std::string& ckpt_path, const std::string& probe_path) {
  LoadedRun run = load_run(app, c, ckpt_path);
  const RunConfig& cfg = run.cfg;
  echo_config(cfg, c.out_dir);
  const Splits data = prepare_data(cfg);
  const std::int64_t held = cfg.held_out_index();
  Probe probe = obtain_probe(cfg, data, probe_path);
  const fs::path out(c.out_dir);
  const FinetuneRun ft = finetune_and_evaluate(cfg, run.net, data, probe);
  Networks adapted = ft.adapted.clone();
  CsvWriter csv((out / "eval.csv").string(), eval_header(cfg));
  print_metrics(cfg, "before", ft.before);
  csv.append(eval_row(cfg, "before", ft.before));
  print_metrics(cfg, "after", ft.after);
  csv.append(eval_row(cfg, "after", ft.after));
  CsvWriter loss_csv((out / "finetune_metrics.csv").string(),
                     {"step", "d_adv", "d_class", "d_gp", "d_total", "g_adv", "g_class", "g_cycle", "g_total"});
  for (std::size_t i = 0; i < ft.history.size(); ++i) {
    const auto& r = ft.history[i];
    loss_csv.append(std::vector<double>{static_cast<double>(i), r.d_adv, r.d_class, r.d_gp, r.d_total, r.g_adv,
                                        r.g_class, r.g_cycle, r.g_total});
  }
  save_checkpoint((out / "finetuned.ckpt").string(), networks_checkpoint(cfg, adapted, run.ckpt.iteration));

  const std::int64_t rows = std::min<std::int64_t>(8, data.test.size());
  std::vector<std::int64_t> idx(static_cast<std::size_t>(rows));
  for (std::int64_t i = 0; i < rows; ++i) idx[i] = i * data.test.size() / rows;
  const auto cells = translation_panel(adapted, data.test.gather(idx), held);
  write_image_grid(cells, rows, cfg.generator.n_domains + 1, (out / "panel.png").string(),
                   {{"columns", "original, trained attributes, few-shot attribute " + cfg.fewshot.held_out}});
  return kOk;
}

int cmd_evaluate(CLI::App* app, const Common& c, const std::string& ckpt_path, const std::string& probe_path) {
  LoadedRun run = load_run(app, c, ckpt_path);
  const RunConfig& cfg = run.cfg;
  echo_config(cfg, c.out_dir);
  const Splits data = prepare_data(cfg);
  Probe probe = obtain_probe(cfg, data, probe_path);
  const EvalMetrics m = evaluate(run.net, data.test, probe, cfg.held_out_index(), cfg.probe.min_accuracy);
  print_metrics(cfg, "eval", m);
  CsvWriter csv((fs::path(c.out_dir) / "eval.csv").string(), eval_header(cfg));
  csv.append(eval_row(cfg, "eval", m));
  return kOk;
}

int cmd_ablate(CLI::App* app, const Common& c, const std::string& ckpt_path, const std::string& probe_path) {
  LoadedRun run = load_run(app, c, ckpt_path);
  const RunConfig& cfg = run.cfg;
  echo_config(cfg, c.out_dir);
  const Splits data = prepare_data(cfg);
  Probe probe = obtain_probe(cfg, data, probe_path);
  const fs::path out(c.out_dir);
  std::vector<std::string> header{"n_samples", "n_steps", "trial", "target_accuracy"};
  for (const auto& a : cfg.data.attributes) header.push_back("acc_" + a);
  header.push_back("cycle_l1");
  CsvWriter csv((out / "ablation.csv").string(), header);
  const int threads = resolve_threads(cfg.fewshot.threads);
  AblationResult res = ablation_grid(run.net, data.train, data.test, probe, cfg, threads, [&](const AblationRow& r) {
    std::vector<double> row{static_cast<double>(r.n_samples), static_cast<double>(r.n_steps),
                            static_cast<double>(r.trial), r.metrics.target_accuracy};
    for (const double a : r.metrics.domain_accuracy) row.push_back(a);
    row.push_back(r.metrics.cycle_l1);
    csv.append(row);
    std::fprintf(stderr, "n=%-3lld steps=%-5lld trial=%lld target_accuracy %.3f\n",
                 static_cast<long long>(r.n_samples), static_cast<long long>(r.n_steps),
                 static_cast<long long>(r.trial), r.metrics.target_accuracy);
  });
  write_image_grid(res.panel, static_cast<std::int64_t>(cfg.fewshot.grid_steps.size()),
                   static_cast<std::int64_t>(cfg.fewshot.grid_samples.size()),
                   (out / ("ablation_" + cfg.fewshot.held_out + ".png")).string(),
                   {{"rows", "fine-tuning steps"}, {"columns", "support samples"}});
  // Mean target accuracy per cell.
  std::printf("%-8s", "steps\\n");
  for (const auto n : cfg.fewshot.grid_samples) std::printf("%8lld", static_cast<long long>(n));
  std::printf("\n");
  for (const auto s : cfg.fewshot.grid_steps) {
    std::printf("%-8lld", static_cast<long long>(s));
    for (const auto n : cfg.fewshot.grid_samples) {
      double sum = 0.0;
      int k = 0;
      for (const auto& r : res.rows) {
        if (r.n_steps == s && r.n_samples == n) {
          sum += r.metrics.target_accuracy;
          ++k;
        }
      }
      std::printf("%8.3f", sum / k);
    }
    std::printf("\n");
  }
  return kOk;
}

int cmd_translate(CLI::App* app, const Common& c, const std::string& ckpt_path, const std::string& input,
                  const std::string& target_name, const std::string& source_name) {
  LoadedRun run = load_run(app, c, ckpt_path);
  const RunConfig& cfg = run.cfg;
  echo_config(cfg, c.out_dir);
  const AttributeSet attrs = cfg.attribute_set();
  const std::int64_t target = attrs.index_of(target_name);
  const RgbImage src = read_png(input);
  const std::int64_t s = cfg.data.image_size;
  const Tensor<float> x = crop_and_resize(src.pixels, src.width, src.height, s).reshaped({1, 3, s, s});
  std::int64_t source = 0;
  if (!source_name.empty()) {
    source = attrs.index_of(source_name);
  } else {
    // Infer the original attribute from the discriminator's classifier head.
    Graph<float> g;
    g.freeze_all();
    const auto logits = discriminator_forward(g, run.net.d, run.net.dcfg, g.constant(x)).cls.value();
    for (std::int64_t k = 1; k < attrs.size(); ++k) {
      if (logits[k] > logits[source]) source = k;
    }
    std::fprintf(stderr, "source attribute inferred as %s\n", attrs.names[source].c_str());
  }
  const Tensor<float> y = translate(run.net, x, one_hot(target, 1, attrs.size()));
  const Tensor<float> rec = translate(run.net, y, one_hot(source, 1, attrs.size()));
  const fs::path out(c.out_dir);
  write_png((out / "translated.png").string(), to_rgb_image(image_at(y, 0)), {{"target", target_name}});
  write_png((out / "cycle.png").string(), to_rgb_image(image_at(rec, 0)), {{"source", attrs.names[source]}});
  std::printf("wrote %s and %s\n", (out / "translated.png").string().c_str(), (out / "cycle.png").string().c_str());
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed, int cases) {
  const auto results = run_gradcheck(seed, cases);
  bool ok = true;
  std::printf("%-24s %6s %14s\n", "op", "cases", "max_rel_error");
  for (const auto& r : results) {
    const bool pass = r.max_rel_error < kGradcheckTolerance;
    ok = ok && pass;
    std::printf("%-24s %6d %14.3e %s\n", r.op.c_str(), r.cases, r.max_rel_error, pass ? "" : "FAIL");
  }
  return ok ? kOk : kFault;
}

}  // namespace

int main(int argc, char** argv) {
  mtat::tune_allocator();
  CLI::App app{"Few-shot attribute translation with a meta-learned conditional GAN"};
  app.require_subcommand(1);

  Common gen_c, probe_c, train_c, ft_c, eval_c, abl_c, tr_c;
  auto* gen = app.add_subcommand("gen-data", "write the synthetic portrait set as PNGs plus an attribute list");
  add_common(gen, gen_c);
  auto* probe = app.add_subcommand("probe-train", "train and save the probe classifier");
  add_common(probe, probe_c);

  auto* train = app.add_subcommand("train-meta", "meta-train on every attribute but the held-out one");
  add_common(train, train_c);
  std::string resume;
  bool allow_change = false;
  train->add_option("--resume", resume, "continue from this checkpoint")->check(CLI::ExistingFile);
  train->add_flag("--allow-config-change", allow_change, "resume even if the config digest differs");

  std::string ckpt_path, probe_path;
  auto add_ckpt = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", ckpt_path, "meta-trained checkpoint")->required()->check(CLI::ExistingFile);
    sub->add_option("--probe", probe_path, "probe checkpoint (trained on the fly if absent)")
        ->check(CLI::ExistingFile);
  };
  auto* ft = app.add_subcommand("finetune", "few-shot fine-tune on the held-out attribute and evaluate");
  add_common(ft, ft_c);
  add_ckpt(ft);
  auto* ev = app.add_subcommand("evaluate", "score a checkpoint with the probe classifier");
  add_common(ev, eval_c);
  add_ckpt(ev);
  auto* abl = app.add_subcommand("ablate", "support-size by step-count grid");
  add_common(abl, abl_c);
  add_ckpt(abl);

  auto* tr = app.add_subcommand("translate", "translate one image and reconstruct it");
  add_common(tr, tr_c);
  std::string input, target_attr, source_attr;
  tr->add_option("--checkpoint", ckpt_path, "checkpoint")->required()->check(CLI::ExistingFile);
  tr->add_option("--input", input, "input PNG")->required()->check(CLI::ExistingFile);
  tr->add_option("--target", target_attr, "target attribute name")->required();
  tr->add_option("--source-attr", source_attr, "attribute of the input (inferred if absent)");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  std::uint64_t gc_seed = 0;
  int gc_cases = 5;
  gc->add_option("--seed", gc_seed, "seed")->capture_default_str();
  gc->add_option("--cases", gc_cases, "random shapes per op")->capture_default_str()->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*gen) return cmd_gen_data(gen, gen_c);
    if (*probe) return cmd_probe_train(probe, probe_c);
    if (*train) return cmd_train_meta(train, train_c, resume, allow_change);
    if (*ft) return cmd_finetune(ft, ft_c, ckpt_path, probe_path);
    if (*ev) return cmd_evaluate(ev, eval_c, ckpt_path, probe_path);
    if (*abl) return cmd_ablate(abl, abl_c, ckpt_path, probe_path);
    if (*tr) return cmd_translate(tr, tr_c, ckpt_path, input, target_attr, source_attr);
    if (*gc) return cmd_gradcheck(gc_seed, gc_cases);
  } catch (const std::invalid_argument& e) {  // config and precondition errors
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "fault: " << e.what() << "\n";
    return kFault;
  }
  return kInvalid;
}
