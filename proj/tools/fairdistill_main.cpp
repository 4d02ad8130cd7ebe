// Command-line driver: corpus generation, vocabulary, teacher pretraining,
// distillation with optional equality rules, finetuning, and bias reports.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "fairdistill/bias.hpp"
#include "fairdistill/corpus.hpp"
#include "fairdistill/distill.hpp"
#include "fairdistill/harness.hpp"
#include "fairdistill/hash.hpp"
#include "fairdistill/report.hpp"
#include "fairdistill/rules.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfigError = 2, kNumericAbort = 3, kHashMismatch = 4 };

std::string utc_timestamp() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// "--config FILE" holds key = value lines (an optional [subcommand] section
// is accepted). Each key becomes "--key=value" right after the subcommand
// unless that flag is already on the command line, so explicit flags win.
// CLI11's own set_config only reads config files for the top-level app.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::optional<std::string> path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i),
                 args.begin() + static_cast<std::ptrdiff_t>(i + 2));
      break;
    }
    if (args[i].starts_with("--config=")) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (!path || args.empty()) return args;
  std::ifstream in(*path);
  if (!in) throw fd::ConfigError("cannot read config file " + *path);
  const auto items = CLI::ConfigINI().from_config(in);
  std::vector<std::string> injected;
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    if (!item.parents.empty() && item.parents != std::vector<std::string>{args[0]})
      continue;
    const std::string flag = "--" + item.name;
    const bool given = std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == flag || a.starts_with(flag + "=");
    });
    if (given) continue;
    std::string value;
    for (std::size_t k = 0; k < item.inputs.size(); ++k)
      value += (k ? "," : "") + item.inputs[k];
    injected.push_back(flag + "=" + value);
  }
  args.insert(args.begin() + 1, injected.begin(), injected.end());
  return args;
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::is_regular_file(p))
    throw fd::InputError(std::string(what) + " not found: " + p.string());
}

// Options shared by the training stages; names mirror the run-config fields.
void add_training_options(CLI::App* app, fd::DistillConfig& c) {
  app->add_option("--learning_rate", c.learning_rate)->capture_default_str();
  app->add_option("--weight_decay", c.weight_decay)->capture_default_str();
  app->add_option("--gradient_accumulation_steps", c.grad_accum_steps)
      ->capture_default_str();
  app->add_option("--adam_epsilon", c.adam_epsilon)->capture_default_str();
  app->add_option("--max_grad_norm", c.max_grad_norm)->capture_default_str();
  app->add_option("--num_train_epochs", c.epochs)->capture_default_str();
  app->add_option("--warmup_steps", c.warmup_steps)->capture_default_str();
  app->add_option("--batch_size", c.batch_size)->capture_default_str();
  app->add_option("--mask_rate", c.mask_rate)->capture_default_str();
  app->add_flag("--linear_decay,!--constant_lr", c.linear_decay);
  app->add_option("--seed", c.seed)->capture_default_str();
}

struct LogFile {
  std::ofstream out;
  explicit LogFile(const std::string& path) {
    if (path.empty()) return;
    out.open(path);
    if (!out) throw fd::InputError("cannot write log " + path);
    out << "step\tL_total\tL_ce\tL_mlm\tL_cos\tlr\twall_ms\n";
  }
  void write(const fd::StepMetrics& m) {
    if (out.is_open()) out << fd::format_log_line(m) << '\n';
  }
};

std::vector<std::vector<fd::TokenId>> load_training_split(
    const fs::path& corpus, const fd::Vocabulary& vocab, std::size_t max_len,
    std::vector<std::vector<fd::TokenId>>* heldout) {
  const auto lines = fd::read_lines(corpus);
  if (lines.empty()) throw fd::InputError("corpus is empty: " + corpus.string());
  const auto split = fd::split_heldout(lines);
  if (heldout) *heldout = fd::encode_lines(split.heldout, vocab, max_len);
  return fd::encode_lines(split.train, vocab, max_len);
}

// --- gen-corpus --------------------------------------------------------

struct GenCorpusArgs {
  std::string out, labeled_out, professions;
  double sigma = 0.9;
  std::size_t count = 20000;
  std::uint64_t seed = 1;
};

int run_gen_corpus(const GenCorpusArgs& a) {
  fd::SyntheticCorpusSpec spec = fd::default_corpus_spec(a.sigma);
  if (!a.professions.empty()) {
    require_file(a.professions, "profession list");
    std::ifstream in(a.professions);
    std::stringstream ss;
    ss << in.rdbuf();
    spec.professions = fd::parse_profession_skews(ss.str(), a.sigma);
  }
  spec.count = a.count;
  spec.seed = a.seed;
  const auto corpus = fd::generate_corpus(spec);
  std::string text;
  for (const auto& s : corpus) text += s.text + "\n";
  fd::write_text(a.out, text);
  if (!a.labeled_out.empty()) fd::write_text(a.labeled_out, fd::labeled_lines(corpus));

  const auto counts = fd::pronoun_counts(corpus, spec.professions.size());
  std::size_t male = 0, female = 0;
  std::cout << "profession\tsigma\tmale\tfemale\tmale_fraction\n";
  for (std::size_t i = 0; i < counts.size(); ++i) {
    std::cout << spec.professions[i].name << '\t' << spec.professions[i].male_prob << '\t'
              << counts[i].male << '\t' << counts[i].female << '\t'
              << counts[i].male_fraction() << '\n';
    male += counts[i].male;
    female += counts[i].female;
  }
  std::cout << "total\t-\t" << male << '\t' << female << '\t'
            << fd::PronounCounts{male, female}.male_fraction() << '\n';
  return kOk;
}

// --- build-vocab -------------------------------------------------------

struct BuildVocabArgs {
  std::string corpus, out, case_mode = "lower";
  fd::VocabOptions options;
};

int run_build_vocab(BuildVocabArgs a) {
  require_file(a.corpus, "corpus");
  a.options.case_mode = fd::parse_case_mode(a.case_mode);
  const auto lines = fd::read_lines(a.corpus);
  const auto vocab = fd::build_vocab(lines, a.options);
  fd::save_vocab(vocab, a.out);
  std::cout << "vocabulary: " << vocab.size() << " tokens, hash "
            << fd::hex32(vocab.content_hash()) << '\n';
  return kOk;
}

// --- train-teacher -----------------------------------------------------

struct TrainTeacherArgs {
  std::string corpus, vocab, out, log;
  fd::ModelConfig model;
  fd::DistillConfig train;
};

int run_train_teacher(TrainTeacherArgs a) {
  require_file(a.corpus, "corpus");
  require_file(a.vocab, "vocabulary");
  const auto vocab = fd::load_vocab(a.vocab);
  a.model.vocab_size = vocab.size();
  a.model.validate();
  a.train.validate();
  std::vector<std::vector<fd::TokenId>> heldout;
  const auto train = load_training_split(a.corpus, vocab, a.model.max_seq_len, &heldout);

  const std::uint64_t eval_seed = fd::heldout_eval_seed(a.train);
  const double before =
      heldout.empty() ? NAN
                      : fd::mlm_eval_loss(fd::init_params(a.model, fd::teacher_init_seed(a.train)), heldout, a.train,
                                          eval_seed);
  LogFile log(a.log);
  const auto params = fd::pretrain_teacher(a.model, train, a.train,
                                           [&](const fd::StepMetrics& m) { log.write(m); });
  const double after = heldout.empty() ? NAN
                                       : fd::mlm_eval_loss(params, heldout, a.train, eval_seed);
  std::cout << "held-out MLM loss: " << before << " -> " << after
            << " (ln V = " << std::log(static_cast<double>(vocab.size())) << ")\n";

  fd::save_checkpoint(params, vocab.content_hash(), a.out);
  fd::write_sidecar(a.out, {{"stage", "train-teacher"},
                            {"model", fd::model_config_json(a.model)},
                            {"training", fd::distill_config_json(a.train)},
                            {"inputs",
                             {{"corpus", a.corpus},
                              {"corpus_hash", fd::file_hash(a.corpus)},
                              {"vocab", a.vocab},
                              {"vocab_hash", fd::hex32(vocab.content_hash())}}},
                            {"heldout_mlm_loss", {{"before", before}, {"after", after}}},
                            {"checkpoint_hash", fd::file_hash(a.out)}});
  return kOk;
}

// --- distill -----------------------------------------------------------

struct DistillArgs {
  std::string teacher, vocab, corpus, rules, out, log, rule_order = "soften-then-rules";
  std::size_t student_layers = 0;
  fd::DistillConfig config;
};

// Checks the checkpoint's recorded file hash when a sidecar exists.
void verify_checkpoint_hash(const fs::path& ckpt) {
  if (!fs::exists(fd::sidecar_path(ckpt))) return;
  const auto meta = fd::read_sidecar(ckpt);
  if (meta.contains("checkpoint_hash") &&
      meta["checkpoint_hash"].get<std::string>() != fd::file_hash(ckpt))
    throw fd::HashMismatchError("checkpoint " + ckpt.string() +
                                " does not match the hash in its metadata");
}

int run_distill(DistillArgs a) {
  require_file(a.teacher, "teacher checkpoint");
  require_file(a.vocab, "vocabulary");
  require_file(a.corpus, "corpus");
  if (!a.rules.empty()) require_file(a.rules, "rule file");
  if (a.rule_order == "soften-then-rules")
    a.config.rule_order = fd::RuleOrder::kSoftenThenRules;
  else if (a.rule_order == "rules-then-soften")
    a.config.rule_order = fd::RuleOrder::kRulesThenSoften;
  else
    throw fd::ConfigError("rule_order must be soften-then-rules or rules-then-soften");
  a.config.validate();

  const auto vocab = fd::load_vocab(a.vocab);
  verify_checkpoint_hash(a.teacher);
  const auto teacher = fd::load_checkpoint(a.teacher, vocab.content_hash()).params;
  std::optional<fd::CompiledRules> rules;
  if (!a.rules.empty()) rules = fd::compile_rules(fd::parse_rule_file(a.rules), vocab);

  fd::ModelConfig scfg = fd::student_config(teacher.config);
  if (a.student_layers) scfg.n_layers = a.student_layers;
  scfg.validate();
  std::vector<std::vector<fd::TokenId>> heldout;
  const auto train = load_training_split(a.corpus, vocab, scfg.max_seq_len, &heldout);

  LogFile log(a.log);
  const auto student =
      fd::distill_student(teacher, rules ? &*rules : nullptr, train, a.config, scfg.n_layers,
                          [&](const fd::StepMetrics& m) { log.write(m); });
  const double loss =
      heldout.empty() ? NAN
                      : fd::mlm_eval_loss(student, heldout, a.config,
                                          fd::heldout_eval_seed(a.config));
  std::cout << "student layers: " << scfg.n_layers << ", held-out MLM loss: " << loss
            << '\n';

  fd::save_checkpoint(student, vocab.content_hash(), a.out);
  fd::write_sidecar(a.out, {{"stage", "distill"},
                            {"model", fd::model_config_json(scfg)},
                            {"training", fd::distill_config_json(a.config)},
                            {"inputs",
                             {{"teacher", a.teacher},
                              {"teacher_hash", fd::file_hash(a.teacher)},
                              {"corpus", a.corpus},
                              {"corpus_hash", fd::file_hash(a.corpus)},
                              {"vocab", a.vocab},
                              {"vocab_hash", fd::hex32(vocab.content_hash())},
                              {"rules", a.rules},
                              {"rules_hash", a.rules.empty() ? "" : fd::file_hash(a.rules)}}},
                            {"heldout_mlm_loss", loss},
                            {"checkpoint_hash", fd::file_hash(a.out)}});
  return kOk;
}

// --- finetune ----------------------------------------------------------

struct FinetuneArgs {
  std::string model, vocab, data, out;
  fd::FinetuneConfig config;
};

int run_finetune(const FinetuneArgs& a) {
  require_file(a.model, "checkpoint");
  require_file(a.vocab, "vocabulary");
  require_file(a.data, "labeled data");
  const auto vocab = fd::load_vocab(a.vocab);
  verify_checkpoint_hash(a.model);
  const auto model = fd::load_checkpoint(a.model, vocab.content_hash()).params;
  std::ifstream in(a.data);
  std::stringstream ss;
  ss << in.rdbuf();
  const auto examples = fd::parse_labeled(ss.str());
  const auto r = fd::finetune_classify(model, vocab, examples, a.config);
  std::cout << "validation accuracy: " << r.accuracy << " (" << r.n_train << " train, "
            << r.n_validation << " validation)\n";
  if (!a.out.empty())
    fd::write_text(a.out, json{{"accuracy", r.accuracy},
                               {"n_train", r.n_train},
                               {"n_validation", r.n_validation},
                               {"final_train_loss", r.final_train_loss},
                               {"model_hash", fd::file_hash(a.model)},
                               {"data_hash", fd::file_hash(a.data)}}
                                  .dump(2) + "\n");
  return kOk;
}

// --- eval-bias ---------------------------------------------------------

struct EvalBiasArgs {
  std::string model, vocab, templates, attributes, rules, seat_sets, bleached, out;
  std::vector<std::string> metrics{"lpbs", "disco", "mrd", "prob_gap"};
  fd::BiasEvalConfig config;
};

int run_eval_bias(EvalBiasArgs a) {
  require_file(a.model, "checkpoint");
  require_file(a.vocab, "vocabulary");
  require_file(a.templates, "template file");
  require_file(a.attributes, "attribute list");
  if (!a.rules.empty()) require_file(a.rules, "rule file");

  a.config.run_lpbs = a.config.run_disco = a.config.run_mrd = a.config.run_gap = false;
  for (const auto& m : a.metrics) {
    if (m == "lpbs") a.config.run_lpbs = true;
    else if (m == "disco") a.config.run_disco = true;
    else if (m == "mrd") a.config.run_mrd = true;
    else if (m == "prob_gap") a.config.run_gap = true;
    else if (m == "seat") {
      if (a.seat_sets.empty()) throw fd::ConfigError("seat needs --seat_sets");
    } else {
      throw fd::ConfigError("unknown metric '" + m + "'");
    }
  }
  const auto vocab = fd::load_vocab(a.vocab);
  verify_checkpoint_hash(a.model);
  const auto params = fd::load_checkpoint(a.model, vocab.content_hash()).params;
  const auto templates = fd::load_templates(a.templates);
  const auto attributes = fd::load_attributes(a.attributes);
  if (!a.seat_sets.empty()) {
    require_file(a.seat_sets, "SEAT set file");
    std::ifstream in(a.seat_sets);
    std::stringstream ss;
    ss << in.rdbuf();
    a.config.seat_sets = fd::parse_seat_sets(ss.str());
  }
  if (!a.bleached.empty()) a.config.bleached = fd::read_lines(a.bleached);

  fd::TransformerMlm base(params);
  std::optional<fd::CompiledRules> rules;
  std::optional<fd::RuleFilteredModel> filtered;
  if (!a.rules.empty()) {
    rules = fd::compile_rules(fd::parse_rule_file(a.rules), vocab);
    filtered.emplace(base, *rules);
  }
  const fd::MaskedLanguageModel& model =
      filtered ? static_cast<const fd::MaskedLanguageModel&>(*filtered) : base;

  auto report = fd::evaluate_bias(model, vocab, templates, attributes, a.config);
  report.metadata["generated_at"] = utc_timestamp();
  report.metadata["checkpoint"] = a.model;
  report.metadata["checkpoint_hash"] = fd::file_hash(a.model);
  report.metadata["vocab_hash"] = fd::hex32(vocab.content_hash());
  report.metadata["template_hash"] = fd::file_hash(a.templates);
  report.metadata["attribute_hash"] = fd::file_hash(a.attributes);
  report.metadata["rules"] = a.rules;
  report.metadata["rules_hash"] = a.rules.empty() ? "" : fd::file_hash(a.rules);
  report.metadata["metrics"] = a.metrics;
  const std::string text = report.to_json().dump(2) + "\n";
  if (a.out.empty())
    std::cout << text;
  else
    fd::write_text(a.out, text);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distill masked language models under probabilistic equality rules"};
  app.require_subcommand(1);
  std::string config_path;  // consumed by expand_config

  GenCorpusArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-corpus", "Write a synthetic pronoun-skewed corpus");
  gen_cmd->add_option("--config", config_path, "key = value file; command-line flags win");
  gen_cmd->add_option("--out", gen.out, "corpus output path")->required();
  gen_cmd->add_option("--labeled_out", gen.labeled_out,
                      "also write 'sentence<TAB>label' lines for finetuning");
  gen_cmd->add_option("--professions", gen.professions,
                      "profession list, 'name' or 'name<TAB>sigma' per line");
  gen_cmd->add_option("--sigma", gen.sigma, "probability of the male pronoun")
      ->capture_default_str();
  gen_cmd->add_option("--count", gen.count)->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed)->capture_default_str();

  BuildVocabArgs bv;
  auto* bv_cmd = app.add_subcommand("build-vocab", "Build a word-level vocabulary");
  bv_cmd->add_option("--config", config_path, "key = value file; command-line flags win");
  bv_cmd->add_option("--corpus", bv.corpus)->required();
  bv_cmd->add_option("--out", bv.out)->required();
  bv_cmd->add_option("--max_size", bv.options.max_size)->capture_default_str();
  bv_cmd->add_option("--min_count", bv.options.min_count)->capture_default_str();
  bv_cmd->add_option("--case", bv.case_mode, "lower or preserve")->capture_default_str();
  std::uint64_t unused_seed = 0;
  bv_cmd->add_option("--seed", unused_seed, "accepted for uniformity; unused");

  TrainTeacherArgs tt;
  auto* tt_cmd = app.add_subcommand("train-teacher", "Pretrain a teacher with MLM");
  tt_cmd->add_option("--config", config_path, "key = value file; command-line flags win");
  tt_cmd->add_option("--corpus", tt.corpus)->required();
  tt_cmd->add_option("--vocab", tt.vocab)->required();
  tt_cmd->add_option("--out", tt.out)->required();
  tt_cmd->add_option("--log", tt.log, "per-update TSV training log");
  tt_cmd->add_option("--n_layers", tt.model.n_layers)->capture_default_str();
  tt_cmd->add_option("--d_model", tt.model.d_model)->capture_default_str();
  tt_cmd->add_option("--n_heads", tt.model.n_heads)->capture_default_str();
  tt_cmd->add_option("--d_ff", tt.model.d_ff)->capture_default_str();
  tt_cmd->add_option("--max_seq_len", tt.model.max_seq_len)->capture_default_str();
  tt_cmd->add_option("--dropout", tt.model.dropout_rate)->capture_default_str();
  add_training_options(tt_cmd, tt.train);

  DistillArgs ds;
  auto* ds_cmd = app.add_subcommand("distill", "Distill a half-depth student");
  ds_cmd->add_option("--config", config_path, "key = value file; command-line flags win");
  ds_cmd->add_option("--teacher", ds.teacher)->required();
  ds_cmd->add_option("--vocab", ds.vocab)->required();
  ds_cmd->add_option("--corpus", ds.corpus)->required();
  ds_cmd->add_option("--rules", ds.rules, "equality rule file; omit for plain distillation");
  ds_cmd->add_option("--out", ds.out)->required();
  ds_cmd->add_option("--log", ds.log, "per-update TSV training log");
  ds_cmd->add_option("--student_layers", ds.student_layers,
                     "override the teacher/2 default");
  ds_cmd->add_option("--temperature", ds.config.temperature)->capture_default_str();
  ds_cmd->add_option("--alpha_ce", ds.config.alpha_ce)->capture_default_str();
  ds_cmd->add_option("--alpha_mlm", ds.config.alpha_mlm)->capture_default_str();
  ds_cmd->add_option("--alpha_cos", ds.config.alpha_cos)->capture_default_str();
  ds_cmd->add_option("--rule_order", ds.rule_order)->capture_default_str();
  ds_cmd->add_flag("--ce_masked_only", ds.config.ce_masked_only);
  add_training_options(ds_cmd, ds.config);

  FinetuneArgs ft;
  auto* ft_cmd = app.add_subcommand("finetune", "Finetune encoder plus affine head on labeled sentences");
  ft_cmd->add_option("--config", config_path, "key = value file; command-line flags win");
  ft_cmd->add_option("--model", ft.model)->required();
  ft_cmd->add_option("--vocab", ft.vocab)->required();
  ft_cmd->add_option("--data", ft.data, "'sentence<TAB>0|1' lines")->required();
  ft_cmd->add_option("--out", ft.out, "write the result as JSON");
  ft_cmd->add_option("--learning_rate", ft.config.learning_rate)->capture_default_str();
  ft_cmd->add_option("--weight_decay", ft.config.weight_decay)->capture_default_str();
  ft_cmd->add_option("--adam_epsilon", ft.config.adam_epsilon)->capture_default_str();
  ft_cmd->add_option("--max_grad_norm", ft.config.max_grad_norm)->capture_default_str();
  ft_cmd->add_option("--gradient_accumulation_steps", ft.config.grad_accum_steps)
      ->capture_default_str();
  ft_cmd->add_option("--num_train_epochs", ft.config.epochs)->capture_default_str();
  ft_cmd->add_option("--batch_size", ft.config.batch_size)->capture_default_str();
  ft_cmd->add_option("--seed", ft.config.seed)->capture_default_str();
  ft_cmd->add_flag("--freeze_encoder", ft.config.freeze_encoder, "train only the affine head");

  EvalBiasArgs eb;
  auto* eb_cmd = app.add_subcommand("eval-bias", "Score a model with the bias metrics");
  eb_cmd->add_option("--config", config_path, "key = value file; command-line flags win");
  eb_cmd->add_option("--model", eb.model)->required();
  eb_cmd->add_option("--vocab", eb.vocab)->required();
  eb_cmd->add_option("--templates", eb.templates)->required();
  eb_cmd->add_option("--attributes", eb.attributes)->required();
  eb_cmd->add_option("--rules", eb.rules, "evaluate the rule-filtered model");
  eb_cmd->add_option("--metrics", eb.metrics, "lpbs disco mrd prob_gap seat")
      ->capture_default_str();
  eb_cmd->add_option("--seat_sets", eb.seat_sets, "X/Y/A/B word sets for SEAT");
  eb_cmd->add_option("--bleached", eb.bleached, "bleached templates with <w>");
  eb_cmd->add_option("--disco_k", eb.config.disco_k)->capture_default_str();
  eb_cmd->add_option("--he", eb.config.he)->capture_default_str();
  eb_cmd->add_option("--she", eb.config.she)->capture_default_str();
  eb_cmd->add_option("--out", eb.out, "report path (stdout when omitted)");
  std::uint64_t eval_seed = 0;
  eb_cmd->add_option("--seed", eval_seed, "accepted for uniformity; evaluation is deterministic");

  try {
    auto args = expand_config(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const fd::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*gen_cmd) return run_gen_corpus(gen);
    if (*bv_cmd) return run_build_vocab(bv);
    if (*tt_cmd) return run_train_teacher(tt);
    if (*ds_cmd) return run_distill(ds);
    if (*ft_cmd) return run_finetune(ft);
    if (*eb_cmd) return run_eval_bias(eb);
  } catch (const fd::HashMismatchError& e) {
    std::cerr << "hash mismatch: " << e.what() << '\n';
    return kHashMismatch;
  } catch (const fd::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << '\n';
    return kNumericAbort;
  } catch (const fd::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "unexpected failure: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
