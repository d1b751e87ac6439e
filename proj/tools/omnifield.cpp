// omnifield: dataset generation, representation building, training,
// evaluation and the segmentation server behind one command.

#include "omnifield/omnifield.hpp"
#include "omnifield/segserver_http.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>

namespace of = omnifield;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_set = false;
  unsigned threads = 0;
  std::string config;
  std::string out;
  bool quiet = false;
  std::vector<std::string> overrides;  // key=value
};

// Resolved settings with the origin of each value, merged as
// flag > config file > built-in default.
struct Resolved {
  of::KeyValues kv;
  std::map<std::string, std::string> source;

  void print(std::ostream& os, const std::string& title) const {
    os << "# " << title << " (flag > config file > default)\n";
    for (const auto& [k, v] : kv.entries()) os << k << " = " << v << "    # " << source.at(k) << "\n";
  }
};

Resolved resolve(const std::string& defaults, const Globals& g, const std::set<std::string>& known,
                 const std::vector<std::pair<std::string, std::string>>& flag_values) {
  Resolved r;
  r.kv = of::KeyValues::parse(defaults, "defaults");
  for (const auto& [k, v] : r.kv.entries()) r.source[k] = "default";
  if (!g.config.empty()) {
    const auto file = of::KeyValues::load(g.config);
    file.check_known(known);
    for (const auto& [k, v] : file.entries()) {
      r.kv.set(k, v);
      r.source[k] = "config " + g.config;
    }
  }
  auto set_flag = [&](const std::string& k, const std::string& v) {
    if (!known.count(k)) of::fail(of::ErrorKind::bad_config, "unknown configuration key '" + k + "'");
    r.kv.set(k, v);
    r.source[k] = "flag";
  };
  for (const auto& [k, v] : flag_values) set_flag(k, v);
  for (const auto& o : g.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) of::fail(of::ErrorKind::bad_config, "--set expects key=value, got '" + o + "'");
    set_flag(of::trim(o.substr(0, eq)), of::trim(o.substr(eq + 1)));
  }
  if (g.seed_set) set_flag("seed", std::to_string(g.seed));
  return r;
}

std::string dataset_root(const std::string& given) {
  if (!given.empty()) return given;
  if (const char* env = std::getenv("OMNIFIELD_DATA"); env && *env) return env;
  of::fail(of::ErrorKind::bad_config, "no dataset directory given and OMNIFIELD_DATA is not set");
}

of::TrainConfig train_config(const Globals& g, std::ostream& log) {
  // A preset chosen in the file or on the command line replaces the defaults
  // before other keys are applied.
  std::string preset = "desk";
  if (!g.config.empty()) of::KeyValues::load(g.config).read("preset", preset);
  for (const auto& o : g.overrides)
    if (o.rfind("preset=", 0) == 0) preset = of::trim(o.substr(7));
  of::TrainConfig base = preset == "paper" ? of::TrainConfig::paper() : of::TrainConfig{};
  auto r = resolve(base.to_config(), g, of::TrainConfig::keys(), {});
  if (!g.quiet) r.print(log, "training configuration");
  of::TrainConfig c = base;
  c.apply(r.kv);
  return c;
}

of::HierSceneSpec scene_spec(const Globals& g, std::ostream& log) {
  auto r = resolve(of::HierSceneSpec{}.to_config(), g, of::HierSceneSpec::keys(), {});
  if (!g.quiet) r.print(log, "scene specification");
  return of::HierSceneSpec::from_config(r.kv);
}

std::vector<double> number_list(std::string text) {
  std::replace(text.begin(), text.end(), ',', ' ');
  return of::KeyValues::number_list("values", text);
}

int cmd_gen(const Globals& g, const std::string& spec_file) {
  auto gl = g;
  if (!spec_file.empty()) gl.config = spec_file;
  const auto spec = scene_spec(gl, std::cerr);
  const std::string out = g.out.empty() ? "scene" : g.out;
  const auto ds = of::generate_dataset(spec);
  of::export_synthetic(ds, spec, out);
  if (!g.quiet) std::cerr << "wrote " << ds.views.size() << " views, " << ds.points.size() << " points, " << ds.queries.size() << " queries to " << out << "\n";
  return 0;
}

int cmd_hierrep(const Globals& g, const std::string& dir) {
  const auto root = dataset_root(dir);
  const auto written = of::update_hierreps(root);
  if (!g.quiet) std::cerr << written << " representation file(s) written in " << root << "\n";
  return 0;
}

int cmd_train(const Globals& g, const std::string& dir, const std::string& loss_log) {
  const auto c = train_config(g, std::cerr);
  const auto ds = of::load_dataset(dataset_root(dir));
  const std::string out = g.out.empty() ? "field.ckpt" : g.out;
  std::ofstream log_file;
  of::TrainHooks hooks;
  if (!loss_log.empty()) {
    log_file.open(loss_log);
    if (!log_file) of::fail(of::ErrorKind::missing_file, "cannot write " + loss_log);
    hooks.loss_log = &log_file;
  }
  hooks.checkpoint_path = out;
  hooks.warnings = g.quiet ? nullptr : &std::cerr;
  const std::size_t every = std::max<std::size_t>(1, c.iterations / 20);
  if (!g.quiet)
    hooks.progress = [&](std::size_t step, const of::LossBreakdown& b, double lr) {
      if ((step + 1) % every == 0 || step + 1 == c.iterations)
        std::fprintf(stderr, "step %zu/%zu  L_H %.5f  L_norm %.5f  total %.5g  lr %.2e\n", step + 1, c.iterations, b.l_h, b.l_norm, b.total, lr);
    };
  const auto result = of::train_scene(ds, c, hooks);
  of::write_field(out, result.field);
  if (!g.quiet) std::cerr << "checkpoint written to " << out << "\n";
  return 0;
}

int cmd_eval(const Globals& g, const std::string& dir, const std::string& which, const std::string& checkpoint, const std::string& values,
             int reference_view) {
  const auto ds = of::load_dataset(dataset_root(dir));
  const std::filesystem::path out = g.out.empty() ? "eval" : g.out;
  std::filesystem::create_directories(out);
  std::ostringstream records;

  if (which == "hier" || which == "instance") {
    if (checkpoint.empty()) of::fail(of::ErrorKind::bad_config, "--checkpoint is required for --which " + which);
    const auto field = of::read_field(checkpoint);
    if (which == "hier") {
      const auto r = of::hierarchical_benchmark(field, ds);
      char table[160];
      std::snprintf(table, sizeof table, "%-8s %8s %8s %8s\n%-8zu %8.1f %8.1f %8.1f\n", "queries", "Lv.1", "Lv.2", "Avg.", r.queries.size(),
                    100 * r.miou_l1, 100 * r.miou_l2, 100 * r.miou_avg);
      std::fputs(table, stdout);
      of::write_file_atomic(out / "table.txt", table);
      for (std::size_t i = 0; i < r.queries.size(); ++i) {
        const auto& q = r.queries[i];
        char line[256];
        std::snprintf(line, sizeof line, "{\"query\":%zu,\"view\":%d,\"x\":%d,\"y\":%d,\"iou_l1\":%.17g,\"iou_l2\":%.17g,\"th_l1\":%.17g,\"th_l2\":%.17g}\n", i,
                      q.query.view, q.query.x, q.query.y, q.iou_l1, q.iou_l2, q.th_l1, q.th_l2);
        records << line;
        const auto& view = ds.views[static_cast<std::size_t>(q.query.view)];
        const auto rv = of::render_field(field, view.camera, ds.point_radius);
        const auto score = of::cosine_score_map(rv, q.query.x, q.query.y);
        const std::string stem = "query" + std::to_string(i);
        of::write_png(out / (stem + "_score.png"), of::score_image(score));
        of::write_png(out / (stem + "_l1.png"), of::overlay_tp_fp_fn(score.threshold(q.th_l1), ds.query_mask(q.query, false), view.rgb));
        of::write_png(out / (stem + "_l2.png"), of::overlay_tp_fp_fn(score.threshold(q.th_l2), ds.query_mask(q.query, true), view.rgb));
      }
    } else {
      const auto r = of::instance_benchmark(field, ds, reference_view);
      char table[160];
      std::snprintf(table, sizeof table, "instance propagation from view %d: %zu pairs, mIoU %.1f\n", reference_view, r.entries.size(), 100 * r.miou);
      std::fputs(table, stdout);
      of::write_file_atomic(out / "table.txt", table);
      for (const auto& e : r.entries) {
        char line[160];
        std::snprintf(line, sizeof line, "{\"object\":%u,\"target_view\":%d,\"iou\":%.17g}\n", e.object, e.target_view, e.iou);
        records << line;
      }
    }
  } else if (which == "ablate-lambda" || which == "ablate-dim") {
    const auto c = train_config(g, std::cerr);
    const std::string setting = which == "ablate-lambda" ? "lambda" : "dim";
    const auto vals = number_list(values.empty() ? (setting == "lambda" ? "0 0.25 0.5 0.75 1" : "2 4 8 16 32 64") : values);
    const auto rows = of::ablation_sweep(ds, c, setting, vals, [&](const of::SweepRow& row) {
      if (!g.quiet) std::cerr << setting << " = " << row.value << " done\n";
    });
    const auto table = of::format_sweep_table(rows);
    std::cout << table;
    of::write_file_atomic(out / "table.txt", table);
    for (const auto& row : rows) records << of::sweep_record(row) << "\n";
  } else {
    of::fail(of::ErrorKind::bad_config, "--which must be hier, instance, ablate-lambda or ablate-dim");
  }
  of::write_file_atomic(out / "records.jsonl", records.str());
  return 0;
}

httplib::Server* g_server = nullptr;

int cmd_serve(const Globals& g, const std::string& dir, const std::string& checkpoint, const std::string& host, int port,
              const std::string& scene_id) {
  if (checkpoint.empty()) of::fail(of::ErrorKind::bad_config, "--checkpoint is required for serve");
  of::SegService svc;
  svc.load_scene(scene_id, dataset_root(dir), checkpoint);
  httplib::Server server;
  of::install_routes(server, svc, g.out.empty() ? "segments" : g.out);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  if (!g.quiet) std::cerr << "serving scene '" << scene_id << "' on http://" << host << ":" << port << "\n";
  if (!server.listen(host, port)) of::fail(of::ErrorKind::invalid_argument, "cannot listen on " + host + ":" + std::to_string(port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"omnifield: hierarchical 3D segmentation fields"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand
  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "Random seed (overrides the config file)");
  app.add_option("--threads", g.threads, "Cap on worker threads (default: available cores)");
  app.add_option("--config", g.config, "Configuration file of key = value lines");
  app.add_option("--out", g.out, "Output path (directory or checkpoint, per subcommand)");
  app.add_flag("--quiet", g.quiet, "Suppress progress and configuration output");
  app.add_option("--set", g.overrides, "Override one configuration key: key=value (repeatable)");
  app.footer(
      "Training keys: " + [] {
        std::string s;
        for (const auto& k : of::TrainConfig::keys()) s += k + " ";
        return s;
      }() +
      "\nScene keys: " + [] {
        std::string s;
        for (const auto& k : of::HierSceneSpec::keys()) s += k + " ";
        return s;
      }() +
      "\nOMNIFIELD_DATA supplies the dataset directory when none is given.\n"
      "Exit codes: 0 ok, 1 other failure, 2 bad configuration or usage, 3 missing file, 4 numerical abort.");

  std::string spec_file;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic scene dataset");
  gen->add_option("spec", spec_file, "Scene specification file (key = value)");

  std::string dataset;
  auto* hierrep = app.add_subcommand("hierrep", "Build missing or stale hierarchical representations");
  hierrep->add_option("dataset", dataset, "Dataset directory");

  std::string loss_log;
  auto* train = app.add_subcommand("train", "Train a feature field");
  train->add_option("dataset", dataset, "Dataset directory");
  train->add_option("--loss-log", loss_log, "Write per-step losses to this file");

  std::string which = "hier", checkpoint, values;
  int reference_view = 0;
  auto* eval = app.add_subcommand("eval", "Run a benchmark");
  eval->add_option("dataset", dataset, "Dataset directory");
  eval->add_option("--which", which, "hier | instance | ablate-lambda | ablate-dim")->check(CLI::IsMember({"hier", "instance", "ablate-lambda", "ablate-dim"}));
  eval->add_option("--checkpoint", checkpoint, "Trained field (hier, instance)");
  eval->add_option("--values", values, "Sweep values, space or comma separated (ablations)");
  eval->add_option("--reference-view", reference_view, "Reference view for instance propagation");

  std::string host = "127.0.0.1", scene_id = "scene";
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "Start the segmentation server");
  serve->add_option("dataset", dataset, "Dataset directory");
  serve->add_option("--checkpoint", checkpoint, "Trained field");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port");
  serve->add_option("--scene-id", scene_id, "Scene name exposed by the API");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  g.seed_set = seed_opt->count() > 0;
  of::set_thread_count(g.threads);

  try {
    if (*gen) return cmd_gen(g, spec_file);
    if (*hierrep) return cmd_hierrep(g, dataset);
    if (*train) return cmd_train(g, dataset, loss_log);
    if (*eval) return cmd_eval(g, dataset, which, checkpoint, values, reference_view);
    if (*serve) return cmd_serve(g, dataset, checkpoint, host, port, scene_id);
  } catch (const of::Error& e) {
    std::cerr << "error [" << e.code() << "]: " << e.what() << "\n";
    return of::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
