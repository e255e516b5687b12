from .cli import main

main(prog_name="robust-irl")
