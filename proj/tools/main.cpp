// mtci: synthetic data generation, training, evaluation, pairwise ranking
// and gradient verification for the multi-task opinion-score model.
//
// Exit codes: 0 success, 2 usage or validation error, 1 failed check or
// internal error.

#include <iostream>

#include "CLI11.hpp"
#include "commands.hpp"
#include "mtci/kv.hpp"

namespace {

std::array<double, 3> parse_fractions(const std::string& text) {
  std::array<double, 3> f{};
  std::size_t i = 0, pos = 0;
  while (i < 3) {
    const auto comma = text.find(',', pos);
    const std::string part = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    f[i++] = mtci::parse_double(part, "--split");
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (i != 3 || text.find(',', pos) != std::string::npos) {
    throw mtci::cli::UsageError("--split expects three comma-separated fractions, got '" + text + "'");
  }
  return f;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task opinion-score prediction with confidence-interval ranking"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand every subcommand's help");

  mtci::cli::GenSynthOptions gen;
  std::string split_text = "0.8,0.1,0.1";
  auto* gen_cmd = app.add_subcommand("gen-synth", "Write a synthetic dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--n", gen.n, "Number of items")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator and split seed")->capture_default_str();
  gen_cmd->add_option("--channels", gen.channels, "Feature channels per block")->capture_default_str();
  gen_cmd->add_option("--blocks", gen.blocks, "Number of blocks")->capture_default_str();
  gen_cmd->add_option("--spatial", gen.spatial, "Feature map height and width")->capture_default_str();
  gen_cmd->add_option("--n-obs", gen.n_obs, "Votes per item")->capture_default_str();
  gen_cmd->add_option("--split", split_text, "train,val,test fractions")->capture_default_str();

  mtci::cli::TrainOptions tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoints and a log");
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required();
  train_cmd->add_option("--out", tr.out, "Run directory")->required();
  train_cmd->add_option("--config", tr.config, "key=value configuration file");
  train_cmd->add_option("--epochs", tr.epochs);
  train_cmd->add_option("--tau", tr.tau, "Gate margin of the CI loss");
  train_cmd->add_option("--lambda", tr.lambda, "Weight of the CI loss in the mu loss");
  train_cmd->add_option("--alpha-mu", tr.alpha_mu);
  train_cmd->add_option("--alpha-sigma", tr.alpha_sigma);
  train_cmd->add_option("--seed", tr.seed, "Initialization and shuffling seed");
  train_cmd->add_option("--batch-size", tr.batch_size);
  train_cmd->add_option("--lr", tr.lr, "Initial learning rate");

  mtci::cli::EvalOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "Report PCC, SCC and accuracy on a split");
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  eval_cmd->add_option("--checkpoint", ev.checkpoint);
  eval_cmd->add_option("--fresh-seed", ev.fresh_seed, "Evaluate an untrained model with this seed");
  eval_cmd->add_option("--split", ev.split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();

  mtci::cli::RankOptions rk;
  std::string pairs_text;
  auto* rank_cmd = app.add_subcommand("rank", "Decide pairwise orderings from predicted intervals");
  rank_cmd->add_option("--data", rk.data, "Dataset directory")->required();
  rank_cmd->add_option("--checkpoint", rk.checkpoint)->required();
  auto* pairs_opt = rank_cmd->add_option("--pairs", pairs_text, "Comma-separated a:b item pairs");
  auto* all_opt = rank_cmd->add_flag("--all-pairs", rk.all_pairs, "Every pair of items");
  pairs_opt->excludes(all_opt);
  rank_cmd->add_option("--z", rk.z, "Interval z value")->capture_default_str();
  rank_cmd->add_option("--n-obs-assumed", rk.n_obs_assumed, "Observer count behind each prediction")
      ->capture_default_str();

  mtci::cli::GradCheckOptions gc;
  auto* gc_cmd = app.add_subcommand("grad-check", "Finite-difference check of the full model");
  gc_cmd->add_option("--config", gc.config, "key=value model configuration (toy size by default)");
  gc_cmd->add_option("--seed", gc.seed)->capture_default_str();
  gc_cmd->add_option("--tolerance", gc.tolerance, "Maximum relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*gen_cmd) {
      gen.split = parse_fractions(split_text);
      mtci::cli::gen_synth(gen, std::cout);
    } else if (*train_cmd) {
      mtci::cli::train(tr, std::cout);
    } else if (*eval_cmd) {
      mtci::cli::eval(ev, std::cout);
    } else if (*rank_cmd) {
      if (!pairs_text.empty()) {
        std::size_t pos = 0;
        while (pos <= pairs_text.size()) {
          const auto comma = pairs_text.find(',', pos);
          rk.pairs.push_back(pairs_text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
          if (comma == std::string::npos) break;
          pos = comma + 1;
        }
      }
      mtci::cli::rank(rk, std::cout);
    } else if (*gc_cmd) {
      mtci::cli::grad_check(gc, std::cout);
    }
  } catch (const mtci::cli::CheckFailed& e) {
    std::cerr << "check failed: " << e.what() << "\n";
    return 1;
  } catch (const mtci::ConfigError& e) {
    std::cerr << "error: invalid " << e.what() << "\n";
    return 2;
  } catch (const mtci::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
