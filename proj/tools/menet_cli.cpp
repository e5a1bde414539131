// menet command-line tool: data generation, training, inference, evaluation,
// distortion and robustness reports. Subcommands only communicate through files.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include "menet/data.hpp"
#include "menet/distortions.hpp"
#include "menet/experiment.hpp"
#include "menet/gradcheck.hpp"
#include "menet/robustness.hpp"
#include "menet/saliency.hpp"
#include "menet/trainer.hpp"
#include "menet/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace menet;

namespace {

enum Exit { kOk = 0, kUsage = 1, kFormat = 2, kNumerical = 3 };

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& s) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path.string());
  f << s;
}

// Every output directory records what produced it.
void write_run_record(const fs::path& dir, const std::string& command, const json& config) {
  fs::create_directories(dir);
  write_json(dir / "run.json", {{"tool", "menet"}, {"version", kVersion}, {"command", command}, {"config", config}});
}

ExperimentConfig read_config(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : load_experiment(path);
}

struct ImageFile {
  std::string id;
  fs::path path;
};

// A dataset directory (images/*.ppm) or a flat directory of .ppm files.
std::vector<ImageFile> list_images(const fs::path& dir) {
  const fs::path root = fs::is_directory(dir / "images") ? dir / "images" : dir;
  if (!fs::is_directory(root)) throw FormatError("not a directory: " + dir.string());
  std::vector<ImageFile> out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_regular_file() && e.path().extension() == ".ppm") out.push_back({e.path().stem().string(), e.path()});
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  if (out.empty()) throw FormatError("no .ppm images in " + root.string());
  return out;
}

fs::path mask_dir(const fs::path& gt) { return fs::is_directory(gt / "masks") ? gt / "masks" : gt; }

Tensor<float> as_batch(const Tensor<float>& image) {
  Tensor<float> out({1, image.dim(0), image.dim(1), image.dim(2)});
  std::copy(image.raw(), image.raw() + image.size(), out.raw());
  return out;
}

void check_size(const Tensor<float>& image, const ModelConfig& model, const fs::path& path) {
  if (static_cast<int>(image.dim(1)) != model.input_size || static_cast<int>(image.dim(2)) != model.input_size)
    throw FormatError(path.string() + ": image is " + std::to_string(image.dim(2)) + "x" +
                      std::to_string(image.dim(1)) + ", model expects " + std::to_string(model.input_size));
}

// ---- gen-data

struct GenData {
  std::string out, split = "train";
  int n = 400, size = 64;
  std::uint64_t seed = 1;
};

int gen_data(const GenData& a) {
  if (a.n < 1) throw ContractError("--n must be >= 1");
  auto samples = generate_synthetic(static_cast<std::size_t>(a.n), a.size, Rng(a.seed, streams::kData));
  DatasetManifest m;
  m.split = a.split;
  m.seed = a.seed;
  m.size = a.size;
  for (const auto& s : samples) m.ids.push_back(s.id);
  save_dataset(a.out, samples, m);
  write_run_record(a.out, "gen-data", {{"n", a.n}, {"size", a.size}, {"seed", a.seed}, {"split", a.split}});
  std::cout << "wrote " << samples.size() << " samples to " << a.out << '\n';
  return kOk;
}

// ---- train

struct Train {
  std::string config, data, val, out;
  bool resume = false;
  bool quiet = false;
};

int train(const Train& a) {
  const fs::path out = a.out;
  Checkpoint start;
  ExperimentConfig cfg = read_config(a.config);
  if (a.resume) {
    start = load_checkpoint(out / "last.ment");
    if (!(start.params.config == cfg.model))
      std::cerr << "warning: resuming with the model config stored in " << (out / "last.ment").string() << '\n';
    // the iteration budget may be extended on resume, everything else stays
    auto train = start.train;
    train.iterations = cfg.train.iterations;
    start.train = train;
    cfg.model = start.params.config;
    cfg.train = start.train;
  } else {
    start = initial_checkpoint(cfg.model, cfg.train);
  }
  auto data = load_dataset(a.data);
  if (!data.empty() && static_cast<int>(data.front().size()) != cfg.model.input_size)
    throw FormatError(a.data + ": samples are " + std::to_string(data.front().size()) + " px, model.input_size is " +
                      std::to_string(cfg.model.input_size));
  TrainOptions opt;
  opt.out_dir = out;
  if (!a.val.empty()) opt.validation = load_dataset(a.val);
  opt.warn = [](const std::string& w) { std::cerr << "warning: " << w << '\n'; };
  const auto t0 = std::chrono::steady_clock::now();
  if (!a.quiet) {
    opt.on_step = [&](const LossRecord& r) {
      if ((r.iteration + 1) % 100 == 0)
        std::cout << "iter " << r.iteration + 1 << " total " << r.total << " ce " << r.l_ce << " ml* " << r.l_ml_star
                  << '\n';
    };
  }
  write_run_record(out, "train", cfg);
  auto res = train_loop(std::move(start), data, opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "trained to iteration " << res.checkpoint.iteration << " in " << secs << " s\n";
  for (const auto& v : res.validation)
    std::cout << "validation " << v.iteration << " F " << v.f_beta << " MAE " << v.mae << '\n';
  return kOk;
}

// ---- infer

struct Infer {
  std::string ckpt, images, out, config;
};

int infer(const Infer& a) {
  const ExperimentConfig cfg = read_config(a.config);
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const MapKind kind = resolve_map(cfg.eval, ck.train.objective);
  const fs::path out = a.out;
  for (const char* sub : {"metric", "ce", "binary"}) fs::create_directories(out / sub);
  json cfg_json = cfg;
  cfg_json["model"] = ck.params.config;
  write_run_record(out, "infer", {{"ckpt", a.ckpt}, {"images", a.images}, {"binary_map", kind == MapKind::metric ? "metric" : "ce"}, {"experiment", cfg_json}});

  std::ofstream timing(out / "timing.csv");
  timing << "id,seconds\n";
  double total = 0;
  const auto files = list_images(a.images);
  for (const auto& file : files) {
    const auto image = load_image(file.path);
    check_size(image, ck.params.config, file.path);
    const auto t0 = std::chrono::steady_clock::now();
    auto maps = predict(ck.params, as_batch(image), cfg.eval.weighting, kind);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    total += secs;
    timing << file.id << ',' << secs << '\n';
    const auto& m = maps.front();
    const int n = static_cast<int>(m.size);
    save_gray(out / "metric" / (file.id + ".pgm"), m.metric, n, n);
    save_gray(out / "ce" / (file.id + ".pgm"), m.ce, n, n);
    std::vector<double> binary(m.binary.begin(), m.binary.end());
    save_gray(out / "binary" / (file.id + ".pgm"), binary, n, n);
  }
  std::cout << files.size() << " images, " << total / files.size() << " s per map\n";
  return kOk;
}

// ---- eval

struct Eval {
  std::string pred, gt, out, map = "metric";
};

int eval(const Eval& a) {
  fs::path pred = a.pred;
  if (fs::is_directory(pred / a.map)) pred /= a.map;
  const fs::path masks = mask_dir(a.gt);
  if (!fs::is_directory(pred)) throw FormatError("not a directory: " + pred.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(pred))
    if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw FormatError("no .pgm maps in " + pred.string());

  EvalAccumulator acc;
  for (const auto& f : files) {
    int w = 0, h = 0, size = 0;
    const auto map = load_gray(f, &w, &h);
    const fs::path mpath = masks / f.filename();
    if (!fs::exists(mpath)) throw FormatError("no ground truth for " + f.string() + " (expected " + mpath.string() + ")");
    const auto mask = load_mask(mpath, &size);
    if (w != size || h != size)
      throw FormatError(f.string() + ": map is " + std::to_string(w) + "x" + std::to_string(h) + ", mask " +
                        mpath.string() + " is " + std::to_string(size) + "x" + std::to_string(size));
    acc.add(f.stem().string(), map, mask);
  }
  const auto report = acc.report();
  const fs::path out = a.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  json j = report;
  j["pred"] = pred.string();
  j["gt"] = masks.string();
  // the report may land in another command's directory, so it carries its own run record
  j["run"] = {{"tool", "menet"}, {"version", kVersion}, {"command", "eval"},
              {"config", {{"pred", a.pred}, {"gt", a.gt}, {"map", a.map}}}};
  write_json(out, j);
  fs::path csv = out;
  csv.replace_extension(".pr.csv");
  write_text(csv, pr_csv(report.curve));
  std::cout << "F " << report.mean.f << " MAE " << report.mean.mae << " maxF " << report.max_f << " over "
            << report.images.size() << " images\n";
  return kOk;
}

// ---- distort

struct Distort {
  std::string images, spec, out;
};

int distort(const Distort& a) {
  DistortionSpec spec;
  {
    std::ifstream f(a.spec);
    if (!f) throw FormatError("cannot open spec " + a.spec);
    json j;
    try {
      j = json::parse(f);
    } catch (const json::exception& e) {
      throw FormatError("spec " + a.spec + ": " + e.what());
    }
    // accept a bare spec or an experiment config with a distortion section
    spec = j.contains("distortion") ? j["distortion"].get<DistortionSpec>() : j.get<DistortionSpec>();
    spec.validate();
  }
  const fs::path out = a.out;
  fs::create_directories(out / "images");
  const fs::path in = a.images;
  const bool dataset = fs::is_directory(in / "masks");
  if (dataset) fs::create_directories(out / "masks");
  const auto files = list_images(in);
  const Rng base(spec.seed, streams::kDistortion);
  json applied = json::array();
  for (std::size_t k = 0; k < files.size(); ++k) {
    Rng rng = base.split(k);
    const DistortionSpec concrete = spec.random_strength ? random_strength(spec, rng) : spec;
    const auto image = load_image(files[k].path);
    save_image(out / "images" / (files[k].id + ".ppm"), apply_distortion(image, concrete, rng));
    if (dataset) {
      const auto m = in / "masks" / (files[k].id + ".pgm");
      if (fs::exists(m)) fs::copy_file(m, out / "masks" / m.filename(), fs::copy_options::overwrite_existing);
    }
    applied.push_back({{"id", files[k].id}, {"label", concrete.label()}});
  }
  if (dataset && fs::exists(in / "manifest.json"))
    fs::copy_file(in / "manifest.json", out / "manifest.json", fs::copy_options::overwrite_existing);
  write_json(out / "spec.json", spec);
  write_run_record(out, "distort", {{"images", a.images}, {"distortion", spec}, {"applied", applied}});
  std::cout << "distorted " << files.size() << " images (" << spec.label() << ")\n";
  return kOk;
}

// ---- robustness

struct Robust {
  std::string ckpt, config, out;
  std::vector<std::string> images;
  std::vector<double> mc;  // p t n
  std::string bound;
};

int robustness(const Robust& a) {
  ExperimentConfig cfg = read_config(a.config);
  auto& rc = cfg.robustness;
  if (!a.mc.empty()) {
    if (a.mc.size() != 3) throw ContractError("--mc expects three values: p t n");
    rc.mc_p = a.mc[0];
    rc.mc_t = a.mc[1];
    rc.mc_samples = static_cast<std::size_t>(a.mc[2]);
  }
  if (!a.bound.empty()) rc.norm = parse_norm(a.bound);
  cfg.validate();

  const Checkpoint ck = load_checkpoint(a.ckpt);
  const auto params = ck.params.cast<double>();
  const fs::path out = a.out;
  write_run_record(out, "robustness", {{"ckpt", a.ckpt}, {"images", a.images}, {"robustness", json(cfg)["robustness"]}});

  RobustnessOptions opts;
  opts.head = rc.head;
  opts.weighting = cfg.eval.weighting;
  std::string table = table_header() + "\n";
  json datasets = json::array();
  for (const auto& dir : a.images) {
    auto files = list_images(dir);
    if (files.size() > rc.max_images) files.resize(rc.max_images);
    std::vector<Tensor<double>> grads;
    json per_image = json::array();
    std::size_t violations = 0;
    for (std::size_t k = 0; k < files.size(); ++k) {
      const auto image = load_image(files[k].path);
      check_size(image, params.config, files[k].path);
      const Tensor<double> x = as_batch(image).template cast<double>();
      const Probe probe = menet_probe(params, x, opts);
      auto g = input_gradient(probe, x);
      const auto b = lipschitz_bound(probe, rc.norm);
      const auto dom = check_dominance(b.G, g);
      violations += dom.violations;
      json rec = {{"id", files[k].id}, {"stats", abs_stats(g)}, {"bound", b}, {"grad_norm", norm(g, rc.norm)},
                  {"violations", dom.violations}, {"worst_ratio", dom.worst_ratio}};
      if (rc.mc_samples > 0) {
        Rng rng = Rng(rc.seed, streams::kProbe).split(k);
        rec["mc"] = mc_directional_norm(probe, x, rc.mc_p, rc.mc_t, rc.mc_samples, rng);
      }
      per_image.push_back(std::move(rec));
      grads.push_back(std::move(g));
    }
    const auto report = jacobian_stats(grads);
    const std::string name = fs::path(dir).filename().empty() ? fs::path(dir).parent_path().filename().string()
                                                              : fs::path(dir).filename().string();
    table += table_row(name, report.mean) + "\n";
    datasets.push_back({{"dataset", name}, {"images", per_image.size()}, {"mean", report.mean},
                        {"bound_violations", violations}, {"per_image", per_image}});
    std::cout << name << ": " << files.size() << " images, bound violations " << violations << '\n';
  }
  write_text(out / "table.csv", table);
  write_json(out / "robustness.json", {{"head", rc.head == ScalarHead::metric ? "metric" : "ce"},
                                       {"norm", norm_name(rc.norm)}, {"datasets", datasets}});
  std::cout << table;
  return kOk;
}

// ---- gradcheck

int gradcheck(const std::string& config, double tolerance) {
  const ExperimentConfig cfg = read_config(config);
  GradcheckOptions opts;
  opts.model = cfg.model;
  opts.seed = cfg.train.seed;
  if (tolerance > 0) opts.tolerance = tolerance;
  const auto t0 = std::chrono::steady_clock::now();
  const auto cases = run_gradcheck(opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool ok = true;
  for (const auto& c : cases) {
    std::cout << (c.passed ? "ok    " : "FAIL  ") << c.name << "  max rel error " << c.max_rel_error << '\n';
    ok = ok && c.passed;
  }
  std::cout << cases.size() << " cases in " << secs << " s, tolerance " << opts.tolerance << '\n';
  return ok ? kOk : kNumerical;
}

// ---- dump-features

std::vector<double> plane(const Tensor<float>& t, std::size_t c) {
  const std::size_t hw = t.dim(2) * t.dim(3);
  std::vector<double> out(t.raw() + c * hw, t.raw() + (c + 1) * hw);
  const auto [lo, hi] = std::minmax_element(out.begin(), out.end());
  const double a = *lo, span = *hi - *lo;
  for (double& v : out) v = span > 0 ? (v - a) / span : 0.0;
  return out;
}

void dump(const fs::path& path, const Tensor<float>& t, std::size_t c) {
  save_gray(path, plane(t, c), static_cast<int>(t.dim(3)), static_cast<int>(t.dim(2)));
}

struct Dump {
  std::string ckpt, image, out;
};

int dump_features(const Dump& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const auto image = load_image(a.image);
  check_size(image, ck.params.config, a.image);
  const fs::path out = a.out;
  write_run_record(out, "dump-features", {{"ckpt", a.ckpt}, {"image", a.image}});
  Tape<float> tape;
  const auto fw = forward(ck.params, tape, as_batch(image), Mode::inference, false);
  for (std::size_t s = 0; s < fw.scale_maps.size(); ++s) {
    char name[32];
    std::snprintf(name, sizeof name, "scale_%02zu.pgm", s);
    dump(out / name, fw.scale_maps[s].value(), 0);
  }
  const auto& emb = fw.embedding.value();
  for (std::size_t c = 0; c < emb.dim(1); ++c) {
    char name[32];
    std::snprintf(name, sizeof name, "embedding_%02zu.pgm", c);
    dump(out / name, emb, c);
  }
  dump(out / "ce_salient.pgm", fw.ce_probs.value(), 1);
  std::cout << fw.scale_maps.size() << " scale maps and " << emb.dim(1) << " embedding channels written to "
            << a.out << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* t = std::getenv("MENET_THREADS")) Eigen::setNbThreads(std::max(1, std::atoi(t)));

  CLI::App app{"MEnet saliency toolkit"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  GenData gd;
  auto* c_gen = app.add_subcommand("gen-data", "Generate a synthetic saliency dataset");
  c_gen->add_option("--out", gd.out, "Output directory")->required();
  c_gen->add_option("--n", gd.n, "Number of samples");
  c_gen->add_option("--size", gd.size, "Image side length");
  c_gen->add_option("--seed", gd.seed, "Data seed");
  c_gen->add_option("--split", gd.split, "Split name stored in the manifest");

  Train tr;
  auto* c_train = app.add_subcommand("train", "Train a model");
  c_train->add_option("--config", tr.config, "Experiment config (JSON)");
  c_train->add_option("--data", tr.data, "Training dataset directory")->required();
  c_train->add_option("--val", tr.val, "Validation dataset directory");
  c_train->add_option("--out", tr.out, "Run directory")->required();
  c_train->add_flag("--resume", tr.resume, "Continue from <out>/last.ment");
  c_train->add_flag("--quiet", tr.quiet, "No per-100-step log");

  Infer inf;
  auto* c_infer = app.add_subcommand("infer", "Write saliency maps for a directory of images");
  c_infer->add_option("--ckpt", inf.ckpt, "Checkpoint")->required();
  c_infer->add_option("--images", inf.images, "Image or dataset directory")->required();
  c_infer->add_option("--out", inf.out, "Output directory")->required();
  c_infer->add_option("--config", inf.config, "Experiment config for the eval section");

  Eval ev;
  auto* c_eval = app.add_subcommand("eval", "Score predicted maps against ground truth");
  c_eval->add_option("--pred", ev.pred, "Directory of .pgm maps (or an infer output)")->required();
  c_eval->add_option("--gt", ev.gt, "Mask or dataset directory")->required();
  c_eval->add_option("--out", ev.out, "Report JSON path; the PR curve goes next to it")->required();
  c_eval->add_option("--map", ev.map, "Subdirectory of an infer output to score")
      ->check(CLI::IsMember({"metric", "ce", "binary"}));

  Distort ds;
  auto* c_distort = app.add_subcommand("distort", "Write distorted copies of a directory of images");
  c_distort->add_option("--images", ds.images, "Image or dataset directory")->required();
  c_distort->add_option("--spec", ds.spec, "Distortion spec (JSON)")->required();
  c_distort->add_option("--out", ds.out, "Output directory")->required();

  Robust rb;
  auto* c_rob = app.add_subcommand("robustness", "Jacobian statistics, Monte-Carlo estimates and bounds");
  c_rob->add_option("--ckpt", rb.ckpt, "Checkpoint")->required();
  c_rob->add_option("--images", rb.images, "Image or dataset directory; repeat for one row per dataset")->required();
  c_rob->add_option("--out", rb.out, "Output directory")->required();
  c_rob->add_option("--config", rb.config, "Experiment config for the robustness section");
  c_rob->add_option("--mc", rb.mc, "Monte-Carlo estimate: p t n")->expected(3);
  c_rob->add_option("--bound", rb.bound, "Norm of the bound: l1, l2 or linf");

  std::string gc_config;
  double gc_tol = 0;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference audit of every layer and loss");
  c_gc->add_option("--config", gc_config, "Experiment config (the model section sizes the network check)");
  c_gc->add_option("--tolerance", gc_tol, "Maximum relative error");

  Dump dp;
  auto* c_dump = app.add_subcommand("dump-features", "Write per-scale feature maps as 8-bit images");
  c_dump->add_option("--ckpt", dp.ckpt, "Checkpoint")->required();
  c_dump->add_option("--image", dp.image, "Input image (.ppm)")->required();
  c_dump->add_option("--out", dp.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*c_gen) return gen_data(gd);
    if (*c_train) return train(tr);
    if (*c_infer) return infer(inf);
    if (*c_eval) return eval(ev);
    if (*c_distort) return distort(ds);
    if (*c_rob) return robustness(rb);
    if (*c_gc) return gradcheck(gc_config, gc_tol);
    if (*c_dump) return dump_features(dp);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kNumerical;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kFormat;
  } catch (const json::exception& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kFormat;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "file error: " << e.what() << '\n';
    return kFormat;
  }
  return kUsage;
}
