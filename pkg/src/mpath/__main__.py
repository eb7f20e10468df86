from mpath.cli import main

main()
