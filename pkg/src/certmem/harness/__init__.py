"""Mock provider, scripted scenarios and the command line interface."""
