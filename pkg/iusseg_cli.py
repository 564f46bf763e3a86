"""
Entry script for the iusseg command line interface, e.g.

    python iusseg_cli.py --output runs/sim gen-dataset --phantoms 4
    python iusseg_cli.py --config experiment.json train --fold 0

See iusseg/cli.py for all commands.
"""

from iusseg.cli import main

if __name__ == '__main__':
    main()
