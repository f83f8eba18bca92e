// Acceptance suite: one pass/fail line per criterion (placeholder, filled
// in after the core builds).
int main() { return 0; }
