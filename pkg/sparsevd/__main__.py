from sparsevd.cli import main

main()
