#include "dialm/synthetic.hpp"

#include <algorithm>
#include <cstdio>
#include <map>

#include "dialm/rng.hpp"

namespace dialm {

namespace {

struct SlotSpec {
  std::string name;
  std::string question;
  std::vector<std::string> values;
};

struct DomainSpec {
  std::string name;
  std::string find_intent;
  std::string book_intent;
  std::vector<SlotSpec> slots;
  // Opening requests; {slot} placeholders name the slots they inform.
  std::vector<std::string> openers;
  // System offer; may reference any slot plus {name}.
  std::vector<std::string> offers;
  std::vector<std::string> names;
  std::vector<SlotSpec> book_slots;
  std::vector<std::string> book_requests;
  std::vector<std::string> book_confirms;
};

const std::vector<std::string> kAreas = {"north", "south", "east", "west", "centre"};
const std::vector<std::string> kPrices = {"cheap", "moderate", "expensive"};
const std::vector<std::string> kDays = {"monday", "tuesday", "wednesday", "thursday",
                                        "friday", "saturday", "sunday"};
const std::vector<std::string> kPeople = {"one", "two", "three", "four", "five", "six"};
const std::vector<std::string> kTimes = {"9 am", "10 am", "noon", "2 pm", "5 pm", "7 pm"};
const std::vector<std::string> kPlaces = {"the museum", "the station", "the airport",
                                          "the cinema", "the park", "the college"};
const std::vector<std::string> kCities = {"cambridge", "london", "ely", "norwich",
                                          "stevenage", "peterborough"};

const std::vector<DomainSpec>& domain_specs() {
  static const std::vector<DomainSpec> specs = {
      {"restaurant",
       "find_restaurant",
       "book_restaurant",
       {{"food", "what type of food would you like ?",
         {"italian", "chinese", "indian", "french", "thai", "mexican"}},
        {"area", "which part of town do you prefer ?", kAreas},
        {"pricerange", "what price range are you looking for ?", kPrices}},
       {"i am looking for a {food} restaurant in the {area}",
        "can you find me a {pricerange} restaurant serving {food} food",
        "i want to eat {food} food", "i need a place to eat in the {area} of town"},
       {"{name} is a {pricerange} {food} restaurant in the {area} .",
        "i recommend {name} , it serves {food} food in the {area} and is {pricerange} ."},
       {"golden wok", "pizza palace", "curry house", "le bistro", "taco stand", "thai garden"},
       {{"book people", "", kPeople}, {"book day", "", kDays}},
       {"please book a table for {book people} people on {book day}",
        "can i reserve it for {book people} on {book day}"},
       {"i have booked a table at {name} for {book people} people on {book day} .",
        "your table for {book people} on {book day} is reserved at {name} ."}},
      {"hotel",
       "find_hotel",
       "book_hotel",
       {{"area", "what area would you like to stay in ?", kAreas},
        {"pricerange", "do you have a price range in mind ?", kPrices},
        {"stars", "how many stars should the hotel have ?", {"two", "three", "four", "five"}},
        {"type", "would you like a hotel or a guesthouse ?", {"hotel", "guesthouse"}}},
       {"i need a {type} in the {area}", "i am looking for a {stars} star {type}",
        "find me a {pricerange} place to stay in the {area}",
        "is there a {pricerange} {type} with {stars} stars"},
       {"{name} is a {stars} star {type} in the {area} with {pricerange} prices .",
        "how about {name} ? it is a {pricerange} {type} in the {area} ."},
       {"acorn house", "city lodge", "river inn", "park view", "the gonville", "ashley hotel"},
       {{"book people", "", kPeople}, {"book day", "", kDays}},
       {"book it for {book people} people starting {book day}",
        "i would like to stay from {book day} , {book people} people"},
       {"{name} is booked for {book people} people from {book day} .",
        "booking confirmed at {name} for {book people} guests starting {book day} ."}},
      {"taxi",
       "book_taxi",
       "",
       {{"departure", "where will you be leaving from ?", kPlaces},
        {"destination", "where are you going ?", kPlaces},
        {"leaveat", "what time do you want to leave ?", kTimes}},
       {"i need a taxi from {departure} to {destination}", "book me a taxi to {destination}",
        "i want a taxi leaving {departure} at {leaveat}"},
       {"a {name} will pick you up at {departure} at {leaveat} to go to {destination} .",
        "your taxi from {departure} to {destination} at {leaveat} is a {name} ."},
       {"red toyota", "black audi", "white ford", "blue honda", "grey volvo", "yellow skoda"},
       {},
       {},
       {}},
      {"train",
       "find_train",
       "book_train",
       {{"departure", "where are you departing from ?", kCities},
        {"destination", "where would you like to travel to ?", kCities},
        {"day", "what day will you travel ?", kDays}},
       {"i need a train from {departure} to {destination}",
        "are there trains to {destination} on {day}",
        "i am leaving {departure} on {day} and need a train"},
       {"train {name} leaves {departure} for {destination} on {day} .",
        "there is train {name} on {day} from {departure} to {destination} ."},
       {"tr1234", "tr5678", "tr2468", "tr1357", "tr9090", "tr4321"},
       {{"book people", "", kPeople}},
       {"yes please book {book people} tickets", "i need {book people} seats on that train"},
       {"i booked {book people} tickets on {name} .",
        "{book people} seats are reserved on train {name} ."}},
  };
  return specs;
}

const std::vector<std::string> kOutOfScope = {
    "what is the weather like on mars", "can you tell me a joke", "how tall is the moon",
    "what is my credit score", "play some jazz music", "how do i cook pasta"};

const std::vector<std::string> kInformTemplates = {"{value} please", "i would prefer {value}",
                                                   "{value} would be great", "make it {value}"};

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[rng.below(v.size())];
}

std::string fill(std::string tpl, const std::map<std::string, std::string>& values) {
  std::string out;
  std::size_t pos = 0;
  while (pos < tpl.size()) {
    const auto open = tpl.find('{', pos);
    if (open == std::string::npos) {
      out += tpl.substr(pos);
      break;
    }
    const auto close = tpl.find('}', open);
    out += tpl.substr(pos, open - pos);
    out += values.at(tpl.substr(open + 1, close - open - 1));
    pos = close + 1;
  }
  return out;
}

std::vector<std::string> placeholders(const std::string& tpl) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while ((pos = tpl.find('{', pos)) != std::string::npos) {
    const auto close = tpl.find('}', pos);
    out.push_back(tpl.substr(pos + 1, close - pos - 1));
    pos = close + 1;
  }
  return out;
}

class DialogueBuilder {
public:
  explicit DialogueBuilder(std::string id) { d_.id = std::move(id); }

  void user(std::string text, std::string intent) {
    Turn t;
    t.speaker = Speaker::user;
    t.text = std::move(text);
    t.intent = std::move(intent);
    t.state = state_;
    d_.turns.push_back(std::move(t));
  }

  void system(std::string text, std::set<std::string> acts) {
    Turn t;
    t.speaker = Speaker::system;
    t.text = std::move(text);
    t.acts = std::move(acts);
    d_.turns.push_back(std::move(t));
  }

  void set_slot(const std::string& domain, const std::string& slot, const std::string& value) {
    state_[{domain, slot}] = value;
    d_.domains.insert(domain);
  }

  Dialogue finish() { return std::move(d_); }

private:
  Dialogue d_;
  DialogueState state_;
};

void run_domain(DialogueBuilder& b, const DomainSpec& spec, Rng& rng, const SynthConfig& cfg) {
  std::map<std::string, std::string> values;
  for (const auto& s : spec.slots) values[s.name] = pick(rng, s.values);
  for (const auto& s : spec.book_slots) values[s.name] = pick(rng, s.values);
  values["name"] = pick(rng, spec.names);

  const std::string& opener = pick(rng, spec.openers);
  for (const auto& slot : placeholders(opener)) b.set_slot(spec.name, slot, values.at(slot));
  b.user(fill(opener, values), spec.find_intent);

  // Ask for up to two slots the opener did not mention.
  std::vector<const SlotSpec*> missing;
  const auto mentioned = placeholders(opener);
  for (const auto& s : spec.slots) {
    if (std::find(mentioned.begin(), mentioned.end(), s.name) == mentioned.end()) {
      missing.push_back(&s);
    }
  }
  rng.shuffle(missing);
  const std::size_t asks = std::min<std::size_t>(missing.size(), 1 + rng.below(2));
  for (std::size_t i = 0; i < asks; ++i) {
    const SlotSpec& s = *missing[i];
    b.system(s.question, {spec.name + "-request"});
    b.set_slot(spec.name, s.name, values.at(s.name));
    b.user(fill(pick(rng, kInformTemplates), {{"value", values.at(s.name)}}), "inform");
  }

  if (spec.book_slots.empty()) {
    b.system(fill(pick(rng, spec.offers), values), {spec.name + "-book", spec.name + "-inform"});
    return;
  }
  b.system(fill(pick(rng, spec.offers), values),
           {spec.name + "-inform", spec.name + "-recommend"});
  if (rng.uniform() < cfg.booking_prob) {
    for (const auto& s : spec.book_slots) b.set_slot(spec.name, s.name, values.at(s.name));
    b.user(fill(pick(rng, spec.book_requests), values), spec.book_intent);
    b.system(fill(pick(rng, spec.book_confirms), values), {spec.name + "-book"});
  }
}

}  // namespace

std::vector<Dialogue> generate_synthetic(std::uint64_t seed, std::size_t n_dialogues,
                                         const SynthConfig& config) {
  if (n_dialogues == 0) throw CorpusError("generate_synthetic: n_dialogues must be >= 1");

  std::vector<const DomainSpec*> pool;
  for (const auto& spec : domain_specs()) {
    if (config.domains.empty() ||
        std::find(config.domains.begin(), config.domains.end(), spec.name) !=
            config.domains.end()) {
      pool.push_back(&spec);
    }
  }
  if (pool.empty()) throw CorpusError("generate_synthetic: no known domain selected");

  Rng rng(mix_seed({seed, 0x53594E54}));
  std::vector<Dialogue> out;
  out.reserve(n_dialogues);
  for (std::size_t i = 0; i < n_dialogues; ++i) {
    char id[64];
    std::snprintf(id, sizeof id, "synth-%llu-%05zu", static_cast<unsigned long long>(seed), i);
    DialogueBuilder b(id);

    if (rng.uniform() < config.system_greeting_prob) {
      b.system("hello , how can i help you today ?", {"general-greet"});
    }
    if (rng.uniform() < config.out_of_scope_prob) {
      b.user(pick(rng, kOutOfScope), kOutOfScopeIntent);
      b.system("sorry , i can not help with that . anything else ?", {"general-reqmore"});
    }

    std::vector<const DomainSpec*> order = pool;
    rng.shuffle(order);
    const std::size_t n_domains =
        (order.size() > 1 && rng.uniform() < config.multi_domain_prob) ? 2 : 1;
    for (std::size_t k = 0; k < n_domains; ++k) run_domain(b, *order[k], rng, config);

    b.user("thank you , goodbye", "goodbye");
    b.system("you are welcome , have a nice day .", {"general-bye"});
    out.push_back(b.finish());
  }
  return out;
}

}  // namespace dialm
