"""Entry point for rxsplat CLI"""

from rxsplat.cli import main

if __name__ == "__main__":
    main()
