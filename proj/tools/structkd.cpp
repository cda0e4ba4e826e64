// Command line front end: dataset generation, teacher and student training,
// evaluation, finite-difference gradient checks, and report assembly.

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "structkd/structkd.hpp"

namespace {

using namespace structkd;

/// Config file first, then every trailing `--key=value` flag on top.
config::TrainConfig load_config(const std::string& path,
                                const std::vector<std::string>& extras) {
  config::TrainConfig cfg;
  if (!path.empty()) cfg = config::parse_config_text(io::read_text(path));
  for (const std::string& e : extras) {
    SKD_CHECK(e.rfind("--", 0) == 0, Config,
              "unrecognized argument '" << e << "', expected --key=value");
    config::apply_override(cfg, e);
  }
  config::validate(cfg);
  return cfg;
}

std::unique_ptr<nets::Network> load_frozen(const std::string& dir) {
  auto net = std::make_unique<nets::Network>(nets::load_checkpoint(dir).net);
  net->set_frozen(true);
  return net;
}

void print_metrics(const metrics::MetricsReport& m) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  if (m.has_segmentation) {
    os << "miou " << m.miou << "\n";
    os << "pixel_accuracy " << m.pixel_accuracy << "\n";
  }
  if (m.has_depth) {
    os << "rel " << m.depth.rel << "\n";
    os << "log10 " << m.depth.log10 << "\n";
    os << "rms " << m.depth.rms << "\n";
    os << "delta1 " << m.depth.delta1 << "\n";
    os << "delta2 " << m.depth.delta2 << "\n";
    os << "delta3 " << m.depth.delta3 << "\n";
  }
  if (m.has_scores) {
    os << "score_teacher " << m.scores.mean_teacher << "\n";
    os << "score_student " << m.scores.mean_student << "\n";
    os << "score_difference " << m.scores.difference << "\n";
  }
  std::cout << os.str();
}

void finish_run(const train::TrainResult& res,
                const config::TrainConfig& cfg, const std::string& scheme) {
  if (!res.task_trace.empty()) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(4);
    os << "final_task_loss " << res.task_trace.back() << "\n";
    os << "final_total_loss " << res.total_trace.back() << "\n";
    std::cout << os.str();
  }
  print_metrics(res.val_metrics);
  if (cfg.out_dir.empty()) return;
  train::RunRecord rec;
  rec.scheme = scheme;
  rec.task = cfg.task;
  rec.seed = cfg.seed;
  rec.metrics = res.val_metrics;
  rec.config_text = config::config_to_text(cfg);
  train::save_run_record(rec, cfg.out_dir);
  std::cout << "record " << cfg.out_dir << "/record.txt\n";
}

int gradcheck_cmd(const std::string& component, int seeds) {
  std::vector<std::string> names;
  if (component == "all")
    names = train::gradcheck_components();
  else
    names.push_back(component);
  bool all_pass = true;
  for (const std::string& name : names)
    for (int s = 1; s <= seeds; ++s) {
      const train::GradcheckReport rep =
          train::run_gradcheck(name, static_cast<std::uint64_t>(s));
      std::cout << "gradcheck " << std::left << std::setw(20)
                << rep.component << " seed=" << std::setw(3) << s
                << std::scientific << std::setprecision(3)
                << " max_rel_err=" << rep.max_rel_err
                << (rep.pass ? " PASS" : " FAIL") << "\n";
      all_pass = all_pass && rep.pass;
    }
  if (!all_pass) {
    std::cerr << "error: gradient check exceeded tolerance 1e-3\n";
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"structured knowledge distillation workbench"};
  app.require_subcommand(1);

  std::string config_path;
  const auto add_cfg = [&config_path](CLI::App* sub) {
    sub->add_option("--config", config_path, "configuration file")
        ->check(CLI::ExistingFile);
    sub->allow_extras();
    return sub;
  };

  CLI::App* gen = add_cfg(app.add_subcommand(
      "gen-data", "generate the benchmark datasets into data_dir"));
  CLI::App* tt = add_cfg(app.add_subcommand(
      "train-teacher", "train the wide teacher on the configured task"));
  CLI::App* ct = add_cfg(app.add_subcommand(
      "cache-teacher",
      "precompute frozen teacher outputs over the training set"));
  CLI::App* di = add_cfg(app.add_subcommand(
      "distill", "train a student with the configured transfer losses"));
  CLI::App* ev = add_cfg(app.add_subcommand(
      "eval", "evaluate a checkpoint on the validation set"));
  std::string model_dir;
  ev->add_option("--model", model_dir, "checkpoint directory")->required();

  CLI::App* gc = app.add_subcommand(
      "gradcheck", "compare loss gradients against central differences");
  std::string component = "all";
  int gc_seeds = 10;
  gc->add_option("--component", component,
                 "loss to check (see docs), or all");
  gc->add_option("--seeds", gc_seeds, "seeds per component")
      ->check(CLI::PositiveNumber);

  CLI::App* rp = app.add_subcommand(
      "report", "aggregate run records into an ablation table");
  std::vector<std::string> record_dirs;
  std::string report_out = "report";
  rp->add_option("records", record_dirs, "run record directories")
      ->required();
  rp->add_option("--out", report_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    int threads = 1;
    if (const char* env = std::getenv("STRUCTKD_THREADS")) {
      threads = std::atoi(env);
      SKD_CHECK(threads >= 1, Config,
                "STRUCTKD_THREADS must be a positive integer, got '" << env
                                                                    << "'");
    }
    ops::set_blas_threads(threads);

    if (*gen) {
      const config::TrainConfig cfg =
          load_config(config_path, gen->remaining());
      SKD_CHECK(!cfg.data_dir.empty(), Config, "gen-data needs data_dir");
      config::TrainConfig g = cfg;
      g.data_dir.clear();
      const train::DatasetBundle data = train::make_datasets(g);
      tasks::save_dataset(data.train, cfg.data_dir + "/train");
      tasks::save_dataset(data.val, cfg.data_dir + "/val");
      std::cout << "wrote " << data.train.size() << " train and "
                << data.val.size() << " val samples to " << cfg.data_dir
                << "\n";
    } else if (*tt) {
      const config::TrainConfig cfg =
          load_config(config_path, tt->remaining());
      const train::DatasetBundle data = train::make_datasets(cfg);
      const train::TrainResult res =
          train::train_teacher(cfg, data.train, data.val);
      finish_run(res, cfg, "teacher");
    } else if (*ct) {
      const config::TrainConfig cfg =
          load_config(config_path, ct->remaining());
      SKD_CHECK(!cfg.teacher_dir.empty() && !cfg.cache_dir.empty(), Config,
                "cache-teacher needs teacher_dir and cache_dir");
      const std::unique_ptr<nets::Network> teacher =
          load_frozen(cfg.teacher_dir);
      const train::DatasetBundle data = train::make_datasets(cfg);
      tasks::cache_teacher_outputs(*teacher, data.train, cfg.cache_dir,
                                   cfg.conv_impl, cfg.batch_size);
      std::cout << "cached " << data.train.size() << " teacher outputs in "
                << cfg.cache_dir << "\n";
    } else if (*di) {
      const config::TrainConfig cfg =
          load_config(config_path, di->remaining());
      const train::DatasetBundle data = train::make_datasets(cfg);
      std::unique_ptr<nets::Network> teacher;
      std::unique_ptr<tasks::TeacherCache> cache;
      if (!cfg.teacher_dir.empty()) teacher = load_frozen(cfg.teacher_dir);
      if (!cfg.cache_dir.empty())
        cache = std::make_unique<tasks::TeacherCache>(
            tasks::load_teacher_cache(cfg.cache_dir));
      const train::TrainResult res = train::distill_train(
          cfg, data.train, data.val, teacher.get(), cache.get());
      finish_run(res, cfg, train::scheme_name(cfg.toggles));
    } else if (*ev) {
      const config::TrainConfig cfg =
          load_config(config_path, ev->remaining());
      nets::Checkpoint ck = nets::load_checkpoint(model_dir);
      const train::DatasetBundle data = train::make_datasets(cfg);
      print_metrics(train::evaluate(ck.net, data.val, cfg));
    } else if (*gc) {
      return gradcheck_cmd(component, gc_seeds);
    } else if (*rp) {
      std::vector<train::RunRecord> records;
      records.reserve(record_dirs.size());
      for (const std::string& d : record_dirs)
        records.push_back(train::load_run_record(d));
      train::write_report(records, report_out);
      std::cout << metrics::to_csv(train::ablation_table(records));
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::Config || e.kind() == ErrorKind::Io ? 2
                                                                      : 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
