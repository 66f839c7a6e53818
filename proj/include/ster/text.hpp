#pragma once

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace ster::text {

inline bool is_alnum(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

inline char lower(char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); }

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = lower(c);
  return out;
}

// Lower-cased runs of ASCII alphanumerics. A hyphen is kept only when it sits
// between two alphanumerics ("white-jacket"); everything else separates.
inline std::vector<std::string> tokenize(std::string_view s) {
  std::vector<std::string> tokens;
  std::string current;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (is_alnum(c)) {
      current.push_back(lower(c));
    } else if (c == '-' && !current.empty() && i + 1 < s.size() && is_alnum(s[i + 1])) {
      current.push_back('-');
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

inline const std::set<std::string>& default_abbreviations() {
  static const std::set<std::string> kAbbrev = {
      "mr", "mrs", "ms", "dr", "st", "approx", "e.g", "i.e", "etc", "vs", "no", "jr", "sr"};
  return kAbbrev;
}

// Splits on '.', '!' or '?' followed by whitespace or end of text, unless
// the word before a '.' is a known abbreviation.
inline std::vector<std::string> split_sentences(
    std::string_view s, const std::set<std::string>& abbreviations = default_abbreviations()) {
  std::vector<std::string> out;
  std::size_t start = 0;
  const auto flush = [&](std::size_t end) {
    std::string_view piece = s.substr(start, end - start);
    const auto a = piece.find_first_not_of(" \t\r\n");
    if (a != std::string_view::npos) {
      const auto b = piece.find_last_not_of(" \t\r\n");
      out.emplace_back(piece.substr(a, b - a + 1));
    }
    start = end;
  };
  for (std::size_t i = 0; i < s.size(); ++i) {
    const char c = s[i];
    if (c != '.' && c != '!' && c != '?') continue;
    const bool boundary = i + 1 == s.size() || std::isspace(static_cast<unsigned char>(s[i + 1]));
    if (!boundary) continue;
    if (c == '.') {
      std::size_t w = i;
      while (w > start && !std::isspace(static_cast<unsigned char>(s[w - 1]))) --w;
      std::string word = to_lower(s.substr(w, i - w));
      while (!word.empty() && !is_alnum(word.front())) word.erase(word.begin());
      if (abbreviations.count(word)) continue;
    }
    flush(i + 1);
  }
  flush(s.size());
  return out;
}

// Parses a plain-text word list: one entry per line, '#' starts a comment.
inline std::vector<std::string> parse_word_list(std::string_view content) {
  std::vector<std::string> words;
  std::istringstream in{std::string(content)};
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto a = line.find_first_not_of(" \t\r");
    if (a == std::string::npos) continue;
    const auto b = line.find_last_not_of(" \t\r");
    words.push_back(to_lower(line.substr(a, b - a + 1)));
  }
  return words;
}

// Porter (1980) suffix-stripping stemmer over lower-case ASCII words.
class PorterStemmer {
 public:
  std::string stem(std::string_view word) const {
    if (word.size() <= 2) return std::string(word);
    State st{std::string(word), 0};
    st.k = static_cast<int>(st.b.size()) - 1;
    step1ab(st);
    if (st.k > 0) {
      step1c(st);
      step2(st);
      step3(st);
      step4(st);
      step5(st);
    }
    return st.b.substr(0, static_cast<std::size_t>(st.k + 1));
  }

 private:
  struct State {
    std::string b;
    int k = 0;  // end of current word
    int j = 0;  // end of stem candidate
  };

  static bool cons(const State& st, int i) {
    switch (st.b[static_cast<std::size_t>(i)]) {
      case 'a': case 'e': case 'i': case 'o': case 'u': return false;
      case 'y': return i == 0 ? true : !cons(st, i - 1);
      default: return true;
    }
  }

  // Number of VC sequences in b[0..j].
  static int m(const State& st) {
    int n = 0, i = 0;
    while (true) {
      if (i > st.j) return n;
      if (!cons(st, i)) break;
      ++i;
    }
    ++i;
    while (true) {
      while (true) {
        if (i > st.j) return n;
        if (cons(st, i)) break;
        ++i;
      }
      ++i;
      ++n;
      while (true) {
        if (i > st.j) return n;
        if (!cons(st, i)) break;
        ++i;
      }
      ++i;
    }
  }

  static bool vowel_in_stem(const State& st) {
    for (int i = 0; i <= st.j; ++i)
      if (!cons(st, i)) return true;
    return false;
  }

  static bool doublec(const State& st, int j) {
    if (j < 1) return false;
    if (st.b[static_cast<std::size_t>(j)] != st.b[static_cast<std::size_t>(j - 1)]) return false;
    return cons(st, j);
  }

  static bool cvc(const State& st, int i) {
    if (i < 2 || !cons(st, i) || cons(st, i - 1) || !cons(st, i - 2)) return false;
    const char ch = st.b[static_cast<std::size_t>(i)];
    return !(ch == 'w' || ch == 'x' || ch == 'y');
  }

  static bool ends(State& st, std::string_view s) {
    const int len = static_cast<int>(s.size());
    if (len > st.k + 1) return false;
    if (st.b.compare(static_cast<std::size_t>(st.k - len + 1), s.size(), s) != 0) return false;
    st.j = st.k - len;
    return true;
  }

  static void setto(State& st, std::string_view s) {
    const std::size_t pos = static_cast<std::size_t>(st.j + 1);
    st.b.replace(pos, static_cast<std::size_t>(st.k) + 1 - pos, s);
    st.k = st.j + static_cast<int>(s.size());
  }

  static void r(State& st, std::string_view s) {
    if (m(st) > 0) setto(st, s);
  }

  static void step1ab(State& st) {
    if (st.b[static_cast<std::size_t>(st.k)] == 's') {
      if (ends(st, "sses")) st.k -= 2;
      else if (ends(st, "ies")) setto(st, "i");
      else if (st.b[static_cast<std::size_t>(st.k - 1)] != 's') st.k--;
    }
    if (ends(st, "eed")) {
      if (m(st) > 0) st.k--;
    } else if ((ends(st, "ed") || ends(st, "ing")) && vowel_in_stem(st)) {
      st.k = st.j;
      if (ends(st, "at")) setto(st, "ate");
      else if (ends(st, "bl")) setto(st, "ble");
      else if (ends(st, "iz")) setto(st, "ize");
      else if (doublec(st, st.k)) {
        st.k--;
        const char ch = st.b[static_cast<std::size_t>(st.k)];
        if (ch == 'l' || ch == 's' || ch == 'z') st.k++;
      } else if (m(st) == 1 && cvc(st, st.k)) {
        setto(st, "e");
      }
    }
  }

  static void step1c(State& st) {
    if (ends(st, "y") && vowel_in_stem(st)) st.b[static_cast<std::size_t>(st.k)] = 'i';
  }

  static void step2(State& st) {
    if (st.k < 1) return;
    switch (st.b[static_cast<std::size_t>(st.k - 1)]) {
      case 'a':
        if (ends(st, "ational")) { r(st, "ate"); break; }
        if (ends(st, "tional")) { r(st, "tion"); break; }
        break;
      case 'c':
        if (ends(st, "enci")) { r(st, "ence"); break; }
        if (ends(st, "anci")) { r(st, "ance"); break; }
        break;
      case 'e':
        if (ends(st, "izer")) { r(st, "ize"); break; }
        break;
      case 'l':
        if (ends(st, "bli")) { r(st, "ble"); break; }
        if (ends(st, "alli")) { r(st, "al"); break; }
        if (ends(st, "entli")) { r(st, "ent"); break; }
        if (ends(st, "eli")) { r(st, "e"); break; }
        if (ends(st, "ousli")) { r(st, "ous"); break; }
        break;
      case 'o':
        if (ends(st, "ization")) { r(st, "ize"); break; }
        if (ends(st, "ation")) { r(st, "ate"); break; }
        if (ends(st, "ator")) { r(st, "ate"); break; }
        break;
      case 's':
        if (ends(st, "alism")) { r(st, "al"); break; }
        if (ends(st, "iveness")) { r(st, "ive"); break; }
        if (ends(st, "fulness")) { r(st, "ful"); break; }
        if (ends(st, "ousness")) { r(st, "ous"); break; }
        break;
      case 't':
        if (ends(st, "aliti")) { r(st, "al"); break; }
        if (ends(st, "iviti")) { r(st, "ive"); break; }
        if (ends(st, "biliti")) { r(st, "ble"); break; }
        break;
      case 'g':
        if (ends(st, "logi")) { r(st, "log"); break; }
        break;
      default:
        break;
    }
  }

  static void step3(State& st) {
    switch (st.b[static_cast<std::size_t>(st.k)]) {
      case 'e':
        if (ends(st, "icate")) { r(st, "ic"); break; }
        if (ends(st, "ative")) { r(st, ""); break; }
        if (ends(st, "alize")) { r(st, "al"); break; }
        break;
      case 'i':
        if (ends(st, "iciti")) { r(st, "ic"); break; }
        break;
      case 'l':
        if (ends(st, "ical")) { r(st, "ic"); break; }
        if (ends(st, "ful")) { r(st, ""); break; }
        break;
      case 's':
        if (ends(st, "ness")) { r(st, ""); break; }
        break;
      default:
        break;
    }
  }

  static void step4(State& st) {
    if (st.k < 1) return;
    switch (st.b[static_cast<std::size_t>(st.k - 1)]) {
      case 'a': if (ends(st, "al")) break; return;
      case 'c': if (ends(st, "ance") || ends(st, "ence")) break; return;
      case 'e': if (ends(st, "er")) break; return;
      case 'i': if (ends(st, "ic")) break; return;
      case 'l': if (ends(st, "able") || ends(st, "ible")) break; return;
      case 'n':
        if (ends(st, "ant") || ends(st, "ement") || ends(st, "ment") || ends(st, "ent")) break;
        return;
      case 'o':
        if (ends(st, "ion") && st.j >= 0 &&
            (st.b[static_cast<std::size_t>(st.j)] == 's' || st.b[static_cast<std::size_t>(st.j)] == 't'))
          break;
        if (ends(st, "ou")) break;
        return;
      case 's': if (ends(st, "ism")) break; return;
      case 't': if (ends(st, "ate") || ends(st, "iti")) break; return;
      case 'u': if (ends(st, "ous")) break; return;
      case 'v': if (ends(st, "ive")) break; return;
      case 'z': if (ends(st, "ize")) break; return;
      default: return;
    }
    if (m(st) > 1) st.k = st.j;
  }

  static void step5(State& st) {
    st.j = st.k;
    if (st.b[static_cast<std::size_t>(st.k)] == 'e') {
      const int a = m(st);
      if (a > 1 || (a == 1 && !cvc(st, st.k - 1))) st.k--;
    }
    if (st.b[static_cast<std::size_t>(st.k)] == 'l' && doublec(st, st.k) && m(st) > 1) st.k--;
  }
};

inline std::string porter_stem(std::string_view word) {
  static const PorterStemmer kStemmer;
  return kStemmer.stem(word);
}

}  // namespace ster::text
