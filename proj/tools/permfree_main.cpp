// Placeholder main; subcommands are wired up once the pipeline modules exist.
int main() { return 0; }
