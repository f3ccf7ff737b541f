#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "ivit/mixing_theory.hpp"
#include "ivit/runtime.hpp"
#include "ivit/train.hpp"

namespace fs = std::filesystem;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out_dir = "out";
};

ivit::Grid parse_grid(const std::string& text) {
  const auto x = text.find('x');
  ivit::require(x != std::string::npos, "grid must look like HxW, got '" + text + "'");
  return {ivit::KeyValues::parse_uint("grid", text.substr(0, x)), ivit::KeyValues::parse_uint("grid", text.substr(x + 1))};
}

ivit::TrainConfig load_config(const Globals& g) {
  ivit::TrainConfig cfg = g.config.empty() ? ivit::TrainConfig{} : ivit::TrainConfig::from_file(g.config);
  if (g.seed) cfg.model.seed = *g.seed;
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  ivit::write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

struct GenFiltersArgs {
  std::string kind = "impulse";
  std::size_t size = 3;
  std::size_t heads = 8;
  std::size_t channels = 0;
  std::optional<double> sigma;
  std::string grid;
  std::string out;
};

void run_gen_filters(const Globals& g, const GenFiltersArgs& a) {
  const ivit::FilterKind kind = ivit::parse_filter_kind(a.kind);
  const std::uint64_t seed = g.seed.value_or(0);
  const ivit::FilterBank bank =
      ivit::generate_filter_bank(kind, a.size, a.heads, a.channels ? a.channels : a.heads, seed, a.sigma);
  ivit::Checkpoint ckpt;
  ckpt.metadata.set("kind", "filters");
  ckpt.metadata.set("filter_kind", ivit::to_string(kind));
  ckpt.metadata.set("size", static_cast<std::uint64_t>(a.size));
  ckpt.metadata.set("heads", static_cast<std::uint64_t>(a.heads));
  ckpt.metadata.set("channels", static_cast<std::uint64_t>(bank.channel_count));
  ckpt.metadata.set("seed", seed);
  if (a.sigma) ckpt.metadata.set("sigma", *a.sigma);
  const std::size_t independence = ivit::bank_independence(bank);
  ckpt.metadata.set("independence", static_cast<std::uint64_t>(independence));
  for (std::size_t h = 0; h < bank.heads(); ++h) ckpt.tensors.set("filter" + std::to_string(h), bank.filters[h].taps());
  if (!a.grid.empty()) {
    const ivit::Grid grid = parse_grid(a.grid);
    ckpt.metadata.set("grid", a.grid);
    const auto convs = ivit::to_conv_matrices(bank, grid);
    for (std::size_t h = 0; h < convs.size(); ++h) ckpt.tensors.set("conv" + std::to_string(h), convs[h].matrix);
  }
  const fs::path out = a.out.empty() ? fs::path(g.out_dir) / "filters.iatt" : fs::path(a.out);
  ivit::save_checkpoint(out, ckpt);
  std::cout << "wrote " << bank.heads() << " " << ivit::to_string(kind) << " filters (independence "
            << independence << ") to " << out.string() << "\n";
}

struct VerifyArgs {
  std::size_t d = 9, k = 1, f = 3, seeds = 20;
  std::string kind = "random";
  std::string grid = "8x8";
  std::string out;
};

void run_verify_theory(const Globals& g, const VerifyArgs& a) {
  const ivit::FilterKind kind = ivit::parse_filter_kind(a.kind);
  const ivit::Grid grid = parse_grid(a.grid);
  std::ostringstream csv;
  csv << "seed,residual_span,residual_functional,condition_holds\n";
  for (std::size_t i = 0; i < a.seeds; ++i) {
    const auto t = ivit::run_span_trial(kind, a.d, a.k, a.f, grid, g.seed.value_or(0) + i);
    csv << t.seed << ',' << ivit::KeyValues::format_double(t.span_residual) << ','
        << ivit::KeyValues::format_double(t.functional_residual) << ',' << (t.condition_holds ? "true" : "false")
        << "\n";
  }
  std::cout << csv.str();
  if (!a.out.empty()) write_text(a.out, csv.str());
}

void run_fit_init(const Globals& g, std::optional<std::size_t> epochs) {
  ivit::TrainConfig cfg = load_config(g);
  if (epochs) cfg.model.fit_epochs = *epochs;
  const auto factors = ivit::fit_impulse_factors(cfg.model);
  const fs::path dir(g.out_dir);
  ivit::save_checkpoint(dir / "factors.iatt", ivit::factors_checkpoint(cfg.model, factors));
  std::ostringstream losses;
  losses << "layer,step,loss\n";
  for (std::size_t l = 0; l < factors.size(); ++l) {
    const auto& r = factors[l].report;
    std::cout << "layer " << l << ": mse " << r.final_mse << ", argmax match " << r.argmax_match << ", max |Q| "
              << r.max_q_norm << ", max |K| " << r.max_k_norm << "\n";
    for (std::size_t s = 0; s < r.loss_history.size(); ++s)
      losses << l << ',' << s << ',' << ivit::KeyValues::format_double(r.loss_history[s]) << "\n";
  }
  write_text(dir / "fit_loss.csv", losses.str());
  std::cout << "wrote " << (dir / "factors.iatt").string() << "\n";
}

void run_train(const Globals& g, const std::string& init_factors) {
  ivit::TrainConfig cfg = load_config(g);
  if (!init_factors.empty()) cfg.init_factors = init_factors;
  const auto data = ivit::load_datasets(cfg);
  auto result = ivit::train(cfg, ivit::initial_model(cfg), data);
  const fs::path dir(g.out_dir);
  ivit::save_checkpoint(dir / "model.iatt", ivit::model_checkpoint(result.state, cfg.to_key_values()));
  write_text(dir / "metrics.csv", result.metrics.to_csv());
  const auto& last = result.metrics.final_test();
  std::cout << "step " << last.step << ": test loss " << last.loss << ", test accuracy " << last.accuracy << "\n";
  std::cout << "wrote " << (dir / "model.iatt").string() << " and " << (dir / "metrics.csv").string() << "\n";
}

ivit::TrainConfig config_from_checkpoint(const ivit::Checkpoint& ckpt) {
  ivit::TrainConfig cfg;
  cfg.read(ckpt.metadata);
  return cfg;
}

void run_eval(const std::string& checkpoint, const std::string& data_dir) {
  const ivit::Checkpoint ckpt = ivit::load_checkpoint(checkpoint);
  const ivit::ModelState st = ivit::model_from_checkpoint(ckpt);
  ivit::TrainConfig cfg = config_from_checkpoint(ckpt);
  if (!data_dir.empty()) cfg.data_dir = data_dir;
  const auto data = ivit::load_datasets(cfg);
  const auto ev = ivit::evaluate(st, data.test, cfg.eval_batch);
  std::cout << "test loss " << ev.loss << ", test accuracy " << ev.accuracy << " (" << data.test.size()
            << " images)\n";
}

struct ExportArgs {
  std::string checkpoint;
  std::size_t layer = 0, head = 0;
  std::optional<std::size_t> sample;
  std::string prefix;
};

void run_export(const Globals& g, const ExportArgs& a) {
  const ivit::Checkpoint ckpt = ivit::load_checkpoint(a.checkpoint);
  const ivit::ModelState st = ivit::model_from_checkpoint(ckpt);
  std::optional<ivit::DataSplits> data;
  if (a.sample) data = ivit::load_datasets(config_from_checkpoint(ckpt));
  const std::string prefix = a.prefix.empty() ? (fs::path(g.out_dir) / ("attn_l" + std::to_string(a.layer) + "_h" +
                                                                        std::to_string(a.head)))
                                                    .string()
                                              : a.prefix;
  const auto files = ivit::export_attention_maps(st, a.layer, a.head, {a.sample}, prefix,
                                                 data ? &data->test : nullptr);
  for (const auto& f : files) std::cout << "wrote " << f.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  ivit::tune_allocator();
  CLI::App app{"Impulse-initialized attention toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Base random seed (overrides the config)");
  app.add_option("--config", g.config, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--out-dir", g.out_dir, "Directory for outputs")->capture_default_str();

  GenFiltersArgs gf;
  auto* gen = app.add_subcommand("gen-filters", "Generate a filter bank and its conv matrices");
  gen->add_option("--kind", gf.kind, "impulse | random | box | gaussian | learned-placeholder")->capture_default_str();
  gen->add_option("--size", gf.size, "Odd filter size")->capture_default_str();
  gen->add_option("--heads", gf.heads, "Number of distinct filters")->capture_default_str();
  gen->add_option("--channels", gf.channels, "Channel count (default: heads)");
  gen->add_option("--sigma", gf.sigma, "Gaussian width");
  gen->add_option("--grid", gf.grid, "Also write conv matrices for this HxW grid");
  gen->add_option("--out", gf.out, "Output file (default <out-dir>/filters.iatt)");

  VerifyArgs va;
  auto* verify = app.add_subcommand("verify-theory", "Check the filter-span condition on seeded instances");
  verify->add_option("--D", va.d, "Channels")->capture_default_str();
  verify->add_option("--k", va.k, "Input rank")->capture_default_str();
  verify->add_option("--f", va.f, "Filter size")->capture_default_str();
  verify->add_option("--bank-kind", va.kind, "Filter kind of the bank")->capture_default_str();
  verify->add_option("--seeds", va.seeds, "Number of seeds")->capture_default_str();
  verify->add_option("--grid", va.grid, "HxW token grid")->capture_default_str();
  verify->add_option("--out", va.out, "Also write the CSV here");

  std::optional<std::size_t> fit_epochs;
  auto* fit = app.add_subcommand("fit-init", "Fit per-layer Q/K factors to random impulse targets");
  fit->add_option("--epochs", fit_epochs, "Override fit_epochs");

  std::string init_factors;
  auto* train = app.add_subcommand("train", "Train a classifier and write model.iatt and metrics.csv");
  train->add_option("--init-factors", init_factors, "Factors written by fit-init")->check(CLI::ExistingFile);

  std::string eval_ckpt, eval_data;
  auto* eval = app.add_subcommand("eval", "Evaluate a model checkpoint on its test split");
  eval->add_option("--checkpoint", eval_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data-dir", eval_data, "Override the CIFAR-10 directory");

  ExportArgs ea;
  auto* exp = app.add_subcommand("export-attn", "Export QK^T, ZQK^TZ^T and the softmax map as PGM images");
  exp->add_option("--checkpoint", ea.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  exp->add_option("--layer", ea.layer, "Layer index")->capture_default_str();
  exp->add_option("--head", ea.head, "Head index")->capture_default_str();
  exp->add_option("--sample", ea.sample, "Test image whose tokens feed the blend (default: P only)");
  exp->add_option("--prefix", ea.prefix, "Output path prefix");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) run_gen_filters(g, gf);
    else if (*verify) run_verify_theory(g, va);
    else if (*fit) run_fit_init(g, fit_epochs);
    else if (*train) run_train(g, init_factors);
    else if (*eval) run_eval(eval_ckpt, eval_data);
    else if (*exp) run_export(g, ea);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
