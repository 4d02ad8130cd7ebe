#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fairdistill/bias.hpp"

namespace fd {

struct ScoreEntry {
  std::string metric;  // "lpbs", "disco", "mrd", "prob_gap"
  std::string template_text;
  std::string attribute;
  double score = 0;
  bool flagged = false;
};

struct Aggregate {
  double mean = 0;
  double std = 0;  // population
  std::size_t count = 0;
};

struct BiasReport {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<ScoreEntry> scores;
  // Attributes skipped because a word was not in the vocabulary.
  std::vector<std::string> skipped;
  bool seat_evaluated = false;
  std::optional<double> seat;  // nullopt when evaluated but undefined

  std::vector<double> raw(std::string_view metric) const;
  Aggregate aggregate(std::string_view metric) const;
  nlohmann::json to_json() const;
};

// Published numbers for pretrained teachers, carried as annotations.
nlohmann::json reference_values();

struct BiasEvalConfig {
  std::string he = "he";
  std::string she = "she";
  std::size_t disco_k = 10;
  bool run_lpbs = true;
  bool run_disco = true;
  bool run_mrd = true;
  bool run_gap = true;
  std::optional<SeatSets> seat_sets;
  std::vector<std::string> bleached = default_bleached_templates();
};

// Runs the selected metrics over every (template, attribute) pair.
BiasReport evaluate_bias(const MaskedLanguageModel& model, const Vocabulary& vocab,
                         std::span<const Template> templates,
                         std::span<const AttributeEntry> attributes,
                         const BiasEvalConfig& config);

}  // namespace fd
