// Learns the shipped BPE merge table from a word list (one word or phrase per
// line, optional trailing count) and writes it in tokenizer file format.
//
//   build_vocab <corpus.txt> <out merges file> [num_merges]

#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "vilseg/tokenizer.hpp"

int main(int argc, char** argv) {
  if (argc < 3) {
    std::cerr << "usage: build_vocab <corpus.txt> <out> [num_merges]\n";
    return 2;
  }
  std::ifstream in(argv[1]);
  if (!in) {
    std::cerr << "cannot open " << argv[1] << '\n';
    return 1;
  }
  std::map<std::string, int> counts;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    std::istringstream fields(line);
    std::string word;
    int count = 1;
    fields >> word;
    if (!(fields >> count)) count = 1;
    counts[word] += count;
  }
  const int num_merges = argc > 3 ? std::stoi(argv[3]) : 400;
  vilseg::Tokenizer tok(vilseg::Tokenizer::learn_merges(counts, num_merges));
  std::ofstream out(argv[2], std::ios::binary);
  out << tok.serialize();
  std::cout << "merges: " << tok.merges().size() << ", vocab size: " << tok.vocab_size() << '\n';
  return 0;
}
